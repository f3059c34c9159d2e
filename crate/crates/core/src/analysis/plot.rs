//! Minimal raster plots (no text): step curves and grouped bars.
//!
//! Axis labels and legends belong in the accompanying markdown; the images
//! carry only axes, a light grid, and the series in a fixed palette.

use crate::data::Image;

pub const PALETTE: [[u8; 3]; 4] = [[31, 119, 180], [214, 39, 40], [44, 160, 44], [148, 103, 189]];

const MARGIN: usize = 24;

struct Canvas {
    img: Image,
}

impl Canvas {
    fn new(width: usize, height: usize) -> Self {
        let mut c = Self {
            img: Image::filled(width, height, [255, 255, 255]),
        };
        let (x0, y0, x1, y1) = c.frame();
        for i in 1..10 {
            let x = x0 + (x1 - x0) * i / 10;
            let y = y0 + (y1 - y0) * i / 10;
            c.line(x as f64, y0 as f64, x as f64, y1 as f64, [230, 230, 230]);
            c.line(x0 as f64, y as f64, x1 as f64, y as f64, [230, 230, 230]);
        }
        c.line(x0 as f64, y1 as f64, x1 as f64, y1 as f64, [0, 0, 0]);
        c.line(x0 as f64, y0 as f64, x0 as f64, y1 as f64, [0, 0, 0]);
        c
    }

    /// Plot area `(x0, y0, x1, y1)` in pixels; y grows downward.
    fn frame(&self) -> (usize, usize, usize, usize) {
        (MARGIN, MARGIN / 2, self.img.width() - MARGIN / 2, self.img.height() - MARGIN)
    }

    fn put(&mut self, x: i64, y: i64, rgb: [u8; 3]) {
        if x >= 0 && y >= 0 && (x as usize) < self.img.width() && (y as usize) < self.img.height() {
            self.img.set_pixel(x as usize, y as usize, rgb);
        }
    }

    fn line(&mut self, xa: f64, ya: f64, xb: f64, yb: f64, rgb: [u8; 3]) {
        let steps = (xb - xa).abs().max((yb - ya).abs()).ceil().max(1.0) as usize;
        for i in 0..=steps {
            let t = i as f64 / steps as f64;
            self.put(
                (xa + t * (xb - xa)).round() as i64,
                (ya + t * (yb - ya)).round() as i64,
                rgb,
            );
        }
    }

    /// Maps data coordinates in `[0,1]²` to pixels.
    fn to_px(&self, x: f64, y: f64) -> (f64, f64) {
        let (x0, y0, x1, y1) = self.frame();
        (
            x0 as f64 + x.clamp(0.0, 1.0) * (x1 - x0) as f64,
            y1 as f64 - y.clamp(0.0, 1.0) * (y1 - y0) as f64,
        )
    }
}

/// Empirical CDF step curves; x is scaled to `[0, x_max]`.
pub fn cdf_plot(series: &[&[(f64, f64)]], x_max: f64, width: usize, height: usize) -> Image {
    let mut c = Canvas::new(width, height);
    let x_max = if x_max > 0.0 { x_max } else { 1.0 };
    for (s, points) in series.iter().enumerate() {
        let rgb = PALETTE[s % PALETTE.len()];
        let mut prev = (0.0, 0.0);
        for &(x, y) in points.iter() {
            let (px, py) = c.to_px(prev.0 / x_max, prev.1);
            let (qx, qy) = c.to_px(x / x_max, y);
            c.line(px, py, qx, py, rgb);
            c.line(qx, py, qx, qy, rgb);
            prev = (x, y);
        }
        let (px, py) = c.to_px(prev.0 / x_max, prev.1);
        let (qx, _) = c.to_px(1.0, prev.1);
        c.line(px, py, qx, py, rgb);
    }
    c.img
}

/// Grouped bars: `groups[g][s]` is the value of series `s` in group `g`, in `[0, y_max]`.
pub fn bar_plot(groups: &[Vec<f64>], y_max: f64, width: usize, height: usize) -> Image {
    let mut c = Canvas::new(width, height);
    let y_max = if y_max > 0.0 { y_max } else { 1.0 };
    let n = groups.len().max(1) as f64;
    for (g, values) in groups.iter().enumerate() {
        let k = values.len().max(1) as f64;
        for (s, &v) in values.iter().enumerate() {
            let left = (g as f64 + 0.1 + 0.8 * s as f64 / k) / n;
            let right = (g as f64 + 0.1 + 0.8 * (s + 1) as f64 / k) / n;
            let (xa, ya) = c.to_px(left, v / y_max);
            let (xb, yb) = c.to_px(right, 0.0);
            let rgb = PALETTE[s % PALETTE.len()];
            let mut y = ya.min(yb);
            while y <= ya.max(yb) {
                c.line(xa, y, xb - 1.0, y, rgb);
                y += 1.0;
            }
        }
    }
    c.img
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plots_have_requested_size_and_ink() {
        let p = cdf_plot(&[&[(0.2, 0.5), (0.6, 1.0)]], 1.0, 120, 80);
        assert_eq!((p.width(), p.height()), (120, 80));
        assert!(p.pixels().chunks(3).any(|px| px == PALETTE[0]));
        let b = bar_plot(&[vec![0.5, 0.2], vec![0.1, 0.9]], 1.0, 160, 100);
        assert!(b.pixels().chunks(3).any(|px| px == PALETTE[1]));
    }
}
