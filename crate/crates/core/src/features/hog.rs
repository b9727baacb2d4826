use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::gradient::central_differences;
use crate::error::{OmrError, Result};
use crate::raster::Plane;

/// Cell histogram layout. The grid is centred on the image; with the
/// reference settings (4 px cells, 54x54 cells, 8 bins) a 227x227 crop yields
/// a 23328-long descriptor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HogConfig {
    pub bins: usize,
    pub cell_size: usize,
    /// Cells per side. `None` fits as many whole cells as the image allows.
    pub cells: Option<usize>,
}

impl Default for HogConfig {
    fn default() -> Self {
        HogConfig {
            bins: 8,
            cell_size: 4,
            cells: Some(54),
        }
    }
}

impl HogConfig {
    pub fn with_bins(bins: usize) -> Self {
        HogConfig {
            bins,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hog {
    /// Cell-major: `full[cell * bins + bin]`.
    pub full: Vec<f64>,
    /// `[mean |Δ full|, mean |Δ bin_0 series|, …]`, length `bins + 1`.
    pub summary: Vec<f64>,
    pub cells_x: usize,
    pub cells_y: usize,
}

/// Unsigned orientation histograms with hard binning. Bin `k` is centred on
/// `k·π/bins`; every pixel's gradient magnitude lands in exactly one bin, so
/// the histogram mass equals the gradient mass of the covered area.
pub fn hog_features(gray: &Plane, config: &HogConfig) -> Result<Hog> {
    if config.bins == 0 || config.cell_size == 0 {
        return Err(OmrError::ConfigInvalid("HoG needs ≥1 bin and cell size ≥1".into()));
    }
    let (w, h) = (gray.width(), gray.height());
    if w < 2 || h < 2 {
        return Err(OmrError::ImageTooSmall {
            width: w as u32,
            height: h as u32,
            min: 2,
        });
    }
    let (cells_x, cells_y) = match config.cells {
        Some(n) => {
            if n * config.cell_size > w || n * config.cell_size > h {
                return Err(OmrError::ConfigMismatch(format!(
                    "{n}x{n} cells of {} px do not fit a {w}x{h} image",
                    config.cell_size
                )));
            }
            (n, n)
        }
        None => (w / config.cell_size, h / config.cell_size),
    };
    let x0 = (w - cells_x * config.cell_size) / 2;
    let y0 = (h - cells_y * config.cell_size) / 2;
    let (gx, gy) = central_differences(gray);
    let bins = config.bins;
    let width = PI / bins as f64;
    let mut full = vec![0.0; cells_x * cells_y * bins];
    for cy in 0..cells_y {
        for cx in 0..cells_x {
            let cell = &mut full[(cy * cells_x + cx) * bins..(cy * cells_x + cx + 1) * bins];
            for py in 0..config.cell_size {
                for px in 0..config.cell_size {
                    let x = x0 + cx * config.cell_size + px;
                    let y = y0 + cy * config.cell_size + py;
                    let (dx, dy) = (gx.get(x, y), gy.get(x, y));
                    let mag = (dx * dx + dy * dy).sqrt();
                    if mag == 0.0 {
                        continue;
                    }
                    cell[orientation_bin(dx, dy, bins, width)] += mag;
                }
            }
        }
    }
    let summary = summarize(&full, bins);
    Ok(Hog {
        full,
        summary,
        cells_x,
        cells_y,
    })
}

#[inline]
pub(crate) fn orientation_bin(dx: f64, dy: f64, bins: usize, width: f64) -> usize {
    let angle = dy.atan2(dx).rem_euclid(PI);
    ((angle / width).round() as usize) % bins
}

fn summarize(full: &[f64], bins: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(bins + 1);
    out.push(mean_abs_diff(full.iter().copied()));
    for b in 0..bins {
        out.push(mean_abs_diff(full.iter().skip(b).step_by(bins).copied()));
    }
    out
}

fn mean_abs_diff(values: impl Iterator<Item = f64>) -> f64 {
    let mut prev: Option<f64> = None;
    let mut sum = 0.0;
    let mut n = 0usize;
    for v in values {
        if let Some(p) = prev {
            sum += (v - p).abs();
            n += 1;
        }
        prev = Some(v);
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}
