//! HSV visualization of a dynamic occupancy grid: value is occupancy, hue
//! is the mean-velocity direction, saturation its magnitude.

use std::f64::consts::TAU;
use std::io::Write;

use crate::error::{Error, Result};
use crate::grid::DynamicOccupancyGrid;

pub const DEFAULT_V_MAX: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrameImage {
    pub width: usize,
    pub height: usize,
    /// Row-major RGB triplets, top row first.
    pub pixels: Vec<[u8; 3]>,
}

impl FrameImage {
    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        self.pixels[y * self.width + x]
    }

    /// Binary PPM (P6).
    pub fn write_ppm<W: Write>(&self, mut out: W) -> Result<()> {
        write!(out, "P6\n{} {}\n255\n", self.width, self.height)?;
        let bytes: Vec<u8> = self.pixels.iter().flatten().copied().collect();
        out.write_all(&bytes)?;
        Ok(())
    }
}

/// Standard HSV to RGB; `h` in degrees, `s` and `v` in [0, 1].
pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [u8; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    let q = |u: f64| ((u + m).clamp(0.0, 1.0) * 255.0).round() as u8;
    [q(r), q(g), q(b)]
}

/// One pixel per cell, upscaled by `scale`. Grid row 0 (nearest the
/// sensor) is drawn at the bottom of the image.
pub fn render_grid(grid: &DynamicOccupancyGrid, v_max: f64, scale: usize) -> Result<FrameImage> {
    if !(v_max > 0.0) || scale == 0 {
        return Err(Error::InvalidParameter("render needs v_max > 0 and scale >= 1".into()));
    }
    let g = grid.geometry();
    let (w, h) = (g.width_cells, g.height_cells);
    let mut pixels = vec![[0u8; 3]; w * h * scale * scale];
    let width = w * scale;
    for i in 0..grid.num_cells() {
        let v = grid.mean_velocity(i);
        let hue = v.y.atan2(v.x).rem_euclid(TAU).to_degrees();
        let sat = (v.norm() / v_max).min(1.0);
        let rgb = hsv_to_rgb(hue, sat, grid.occupancy()[i]);
        let (col, row) = g.col_row(i);
        let top = (h - 1 - row) * scale;
        for dy in 0..scale {
            let start = (top + dy) * width + col * scale;
            pixels[start..start + scale].fill(rgb);
        }
    }
    Ok(FrameImage { width, height: h * scale, pixels })
}
