use std::path::Path;

use crate::error::{Error, Result};

/// 8-bit RGB image, row-major, channel-last.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Image {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

/// Per-channel input normalization applied before the backbone.
const INPUT_MEAN: f64 = 0.5;
const INPUT_STD: f64 = 0.25;

impl Image {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || pixels.len() != width * height * 3 {
            return Err(Error::Shape(format!(
                "RGB image {width}x{height} needs {} bytes, got {}",
                width * height * 3,
                pixels.len()
            )));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        Self {
            width,
            height,
            pixels: rgb.iter().copied().cycle().take(width * height * 3).collect(),
        }
    }

    /// Quantizes `[0, 1]` floats (clamped) into an 8-bit image.
    pub fn from_unit_floats(width: usize, height: usize, values: &[f64]) -> Result<Self> {
        let pixels = values
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        Self::new(width, height, pixels)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    /// Backbone input: `(v / 255 − 0.5) / 0.25`, channel-last.
    pub fn normalized(&self) -> Vec<f64> {
        self.pixels
            .iter()
            .map(|&p| (p as f64 / 255.0 - INPUT_MEAN) / INPUT_STD)
            .collect()
    }

    pub fn flipped_horizontal(&self) -> Self {
        let mut out = self.pixels.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                let src = (y * self.width + x) * 3;
                let dst = (y * self.width + (self.width - 1 - x)) * 3;
                out[dst..dst + 3].copy_from_slice(&self.pixels[src..src + 3]);
            }
        }
        Self {
            width: self.width,
            height: self.height,
            pixels: out,
        }
    }

    /// Zero-pads by `pad` and crops back to the original size at offset `(dx, dy)`
    /// in the padded frame.
    pub fn padded_crop(&self, pad: usize, dx: usize, dy: usize) -> Self {
        let mut out = vec![0u8; self.pixels.len()];
        for y in 0..self.height {
            for x in 0..self.width {
                let sx = (x + dx) as isize - pad as isize;
                let sy = (y + dy) as isize - pad as isize;
                if sx < 0 || sy < 0 || sx >= self.width as isize || sy >= self.height as isize {
                    continue;
                }
                let src = (sy as usize * self.width + sx as usize) * 3;
                let dst = (y * self.width + x) * 3;
                out[dst..dst + 3].copy_from_slice(&self.pixels[src..src + 3]);
            }
        }
        Self {
            width: self.width,
            height: self.height,
            pixels: out,
        }
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)?.to_rgb8();
        let (w, h) = img.dimensions();
        Self::new(w as usize, h as usize, img.into_raw())
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        image::save_buffer(
            path,
            &self.pixels,
            self.width as u32,
            self.height as u32,
            image::ExtendedColorType::Rgb8,
        )?;
        Ok(())
    }
}
