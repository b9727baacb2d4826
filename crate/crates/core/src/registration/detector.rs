//! Multi-scale Harris corners with dominant-orientation assignment and a
//! 64-dimensional SURF-style descriptor (4x4 sub-regions, each summarised by
//! `Σdx, Σdy, Σ|dx|, Σ|dy|` in the keypoint's rotated frame).

use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

use crate::error::{OmrError, Result};
use crate::raster::{check_nonempty, Plane};

pub const DESCRIPTOR_LEN: usize = 64;

/// Tag recorded with every feature set produced by this detector.
pub const HARRIS_SURF64: &str = "harris-surf64";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    /// Characteristic scale in source pixels.
    pub scale: f64,
    /// Dominant gradient direction, radians in `[0, 2π)`.
    pub orientation: f64,
    pub response: f64,
    pub descriptor: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub detector: String,
    pub octaves: usize,
    pub harris_k: f64,
    /// Gaussian window for the structure tensor, in level pixels.
    pub integration_sigma: f64,
    /// Minimum Harris response (intensities scaled to [0, 1]).
    pub threshold: f64,
    pub nms_radius: usize,
    pub max_keypoints: usize,
    /// Descriptor sample spacing in level pixels (20x20 samples per descriptor).
    pub descriptor_step: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            detector: HARRIS_SURF64.to_string(),
            octaves: 3,
            harris_k: 0.04,
            integration_sigma: 1.5,
            threshold: 1e-4,
            nms_radius: 3,
            max_keypoints: 1500,
            descriptor_step: 1.5,
        }
    }
}

impl DetectorConfig {
    /// Settings for small standardized answer-box crops.
    pub fn roi() -> Self {
        DetectorConfig {
            octaves: 2,
            threshold: 5e-5,
            nms_radius: 2,
            max_keypoints: 48,
            descriptor_step: 1.0,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.detector != HARRIS_SURF64 {
            return Err(OmrError::ConfigInvalid(format!(
                "unknown detector `{}`",
                self.detector
            )));
        }
        if self.octaves == 0 || self.descriptor_step <= 0.0 || self.integration_sigma <= 0.0 {
            return Err(OmrError::ConfigInvalid(
                "detector needs ≥1 octave and positive sigma/step".into(),
            ));
        }
        Ok(())
    }
}

pub const MIN_DETECT_SIDE: usize = 32;

/// Detects keypoints on a gray plane (intensities in [0, 1]).
pub fn detect_features(image: &Plane, config: &DetectorConfig) -> Result<Vec<Keypoint>> {
    check_nonempty(image.width() as u32, image.height() as u32)?;
    config.validate()?;
    if image.width().min(image.height()) < MIN_DETECT_SIDE {
        return Err(OmrError::ImageTooSmall {
            width: image.width() as u32,
            height: image.height() as u32,
            min: MIN_DETECT_SIDE as u32,
        });
    }
    detect_unchecked(image, config)
}

/// Same as [`detect_features`] without the minimum-size precondition; used on
/// answer-box crops.
pub(crate) fn detect_unchecked(image: &Plane, config: &DetectorConfig) -> Result<Vec<Keypoint>> {
    config.validate()?;
    let mut candidates: Vec<(usize, Candidate)> = Vec::new();
    let mut levels = Vec::with_capacity(config.octaves);
    let mut level = image.clone();
    for octave in 0..config.octaves {
        if level.width() < 8 || level.height() < 8 {
            break;
        }
        let grads = Gradients::of(&level);
        for c in harris_candidates(&grads, config) {
            candidates.push((octave, c));
        }
        levels.push(grads);
        if octave + 1 < config.octaves {
            level = level.downsample2();
        }
    }
    candidates.sort_by(|a, b| {
        b.1.response
            .total_cmp(&a.1.response)
            .then(a.0.cmp(&b.0))
            .then(a.1.y.total_cmp(&b.1.y))
            .then(a.1.x.total_cmp(&b.1.x))
    });

    let (w, h) = (image.width() as f64, image.height() as f64);
    let mut out = Vec::new();
    for (octave, c) in candidates {
        if out.len() >= config.max_keypoints {
            break;
        }
        let grads = &levels[octave];
        let factor = (1u32 << octave) as f64;
        let Some(orientation) = dominant_orientation(grads, c.x, c.y, config.integration_sigma)
        else {
            continue;
        };
        let Some(descriptor) = describe(grads, c.x, c.y, orientation, config.descriptor_step)
        else {
            continue;
        };
        let x = ((c.x + 0.5) * factor - 0.5).clamp(0.0, w - 1.0);
        let y = ((c.y + 0.5) * factor - 0.5).clamp(0.0, h - 1.0);
        out.push(Keypoint {
            x,
            y,
            scale: config.integration_sigma * factor,
            orientation,
            response: c.response,
            descriptor,
        });
    }
    Ok(out)
}

pub(crate) struct Gradients {
    pub gx: Plane,
    pub gy: Plane,
}

impl Gradients {
    fn of(p: &Plane) -> Self {
        let (w, h) = (p.width(), p.height());
        let gx = Plane::from_fn(w, h, |x, y| {
            0.5 * (p.get_clamped(x as isize + 1, y as isize) - p.get_clamped(x as isize - 1, y as isize))
        });
        let gy = Plane::from_fn(w, h, |x, y| {
            0.5 * (p.get_clamped(x as isize, y as isize + 1) - p.get_clamped(x as isize, y as isize - 1))
        });
        Gradients { gx, gy }
    }
}

struct Candidate {
    x: f64,
    y: f64,
    response: f64,
}

fn harris_candidates(g: &Gradients, config: &DetectorConfig) -> Vec<Candidate> {
    let (w, h) = (g.gx.width(), g.gx.height());
    let mut xx = Plane::new(w, h);
    let mut yy = Plane::new(w, h);
    let mut xy = Plane::new(w, h);
    for i in 0..w * h {
        let (dx, dy) = (g.gx.data()[i], g.gy.data()[i]);
        xx.data_mut()[i] = dx * dx;
        yy.data_mut()[i] = dy * dy;
        xy.data_mut()[i] = dx * dy;
    }
    let s = config.integration_sigma;
    let (xx, yy, xy) = (xx.gaussian_blur(s), yy.gaussian_blur(s), xy.gaussian_blur(s));
    let k = config.harris_k;
    let r = Plane::from_fn(w, h, |x, y| {
        let (a, b, c) = (xx.get(x, y), yy.get(x, y), xy.get(x, y));
        a * b - c * c - k * (a + b) * (a + b)
    });

    let rad = config.nms_radius as isize;
    let mut out = Vec::new();
    for y in 1..h.saturating_sub(1) {
        for x in 1..w.saturating_sub(1) {
            let v = r.get(x, y);
            if v <= config.threshold {
                continue;
            }
            let mut is_max = true;
            'nms: for dy in -rad..=rad {
                for dx in -rad..=rad {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    let (nx, ny) = (x as isize + dx, y as isize + dy);
                    if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                        continue;
                    }
                    let n = r.get(nx as usize, ny as usize);
                    // ties resolve to the first pixel in raster order
                    let earlier = (dy, dx) < (0, 0);
                    if n > v || (earlier && n == v) {
                        is_max = false;
                        break 'nms;
                    }
                }
            }
            if !is_max {
                continue;
            }
            let ox = parabolic_offset(r.get(x - 1, y), v, r.get(x + 1, y));
            let oy = parabolic_offset(r.get(x, y - 1), v, r.get(x, y + 1));
            out.push(Candidate {
                x: x as f64 + ox,
                y: y as f64 + oy,
                response: v,
            });
        }
    }
    out
}

fn parabolic_offset(left: f64, centre: f64, right: f64) -> f64 {
    let denom = left - 2.0 * centre + right;
    if denom.abs() < 1e-15 {
        return 0.0;
    }
    (0.5 * (left - right) / denom).clamp(-0.5, 0.5)
}

const ORIENTATION_BINS: usize = 36;

fn dominant_orientation(g: &Gradients, x: f64, y: f64, sigma: f64) -> Option<f64> {
    let radius = (3.0 * 1.5 * sigma).ceil() as isize;
    let weight_sigma = 1.5 * sigma;
    let (cx, cy) = (x.round() as isize, y.round() as isize);
    let mut hist = [0.0f64; ORIENTATION_BINS];
    for dy in -radius..=radius {
        for dx in -radius..=radius {
            let (px, py) = (cx + dx, cy + dy);
            if px < 0 || py < 0 || px >= g.gx.width() as isize || py >= g.gx.height() as isize {
                continue;
            }
            let gx = g.gx.get(px as usize, py as usize);
            let gy = g.gy.get(px as usize, py as usize);
            let mag = (gx * gx + gy * gy).sqrt();
            if mag == 0.0 {
                continue;
            }
            let (fx, fy) = (px as f64 - x, py as f64 - y);
            let w = (-(fx * fx + fy * fy) / (2.0 * weight_sigma * weight_sigma)).exp();
            let angle = gy.atan2(gx).rem_euclid(TAU);
            let bin = ((angle / TAU * ORIENTATION_BINS as f64) as usize).min(ORIENTATION_BINS - 1);
            hist[bin] += w * mag;
        }
    }
    for _ in 0..2 {
        let prev = hist;
        for i in 0..ORIENTATION_BINS {
            let l = prev[(i + ORIENTATION_BINS - 1) % ORIENTATION_BINS];
            let r = prev[(i + 1) % ORIENTATION_BINS];
            hist[i] = (l + prev[i] + r) / 3.0;
        }
    }
    let (best, &peak) = hist
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))?;
    if peak <= 0.0 {
        return None;
    }
    let l = hist[(best + ORIENTATION_BINS - 1) % ORIENTATION_BINS];
    let r = hist[(best + 1) % ORIENTATION_BINS];
    let offset = parabolic_offset(l, peak, r);
    let angle = (best as f64 + 0.5 + offset) * TAU / ORIENTATION_BINS as f64;
    let angle = angle.rem_euclid(TAU);
    // rem_euclid can return TAU itself for tiny negative inputs
    Some(if angle >= TAU { 0.0 } else { angle })
}

const DESC_SAMPLES: usize = 20;
const DESC_SUB: usize = 5;

fn describe(g: &Gradients, x: f64, y: f64, theta: f64, step: f64) -> Option<Vec<f64>> {
    let (s, c) = theta.sin_cos();
    let sigma = 3.3 * step;
    let mut desc = vec![0.0; DESCRIPTOR_LEN];
    let half = (DESC_SAMPLES as f64 - 1.0) / 2.0;
    for j in 0..DESC_SAMPLES {
        for i in 0..DESC_SAMPLES {
            let u = (i as f64 - half) * step;
            let v = (j as f64 - half) * step;
            let px = x + u * c - v * s;
            let py = y + u * s + v * c;
            let gx = g.gx.sample(px, py);
            let gy = g.gy.sample(px, py);
            let w = (-(u * u + v * v) / (2.0 * sigma * sigma)).exp();
            let du = w * (gx * c + gy * s);
            let dv = w * (-gx * s + gy * c);
            let cell = (j / DESC_SUB) * 4 + i / DESC_SUB;
            let d = &mut desc[cell * 4..cell * 4 + 4];
            d[0] += du;
            d[1] += dv;
            d[2] += du.abs();
            d[3] += dv.abs();
        }
    }
    let norm = desc.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(norm > 1e-12) {
        return None;
    }
    desc.iter_mut().for_each(|v| *v /= norm);
    Some(desc)
}

/// Smallest angular distance between two orientations.
pub fn angle_diff(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(TAU);
    d.min(TAU - d)
}
