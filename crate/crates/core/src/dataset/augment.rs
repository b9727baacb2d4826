use serde::{Deserialize, Serialize};

use super::labels::LabeledSample;
use crate::classifiers::AnswerClass;
use crate::error::{OmrError, Result};
use crate::features::RoiImage;
use crate::raster::{sample_rgb, to_u8, ColorImage, Rgb, WHITE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Flip {
    Horizontal,
    Vertical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationConfig {
    /// Each offset is applied towards the left, right, top and bottom.
    pub translations_px: Vec<u32>,
    pub rotations_deg: Vec<f64>,
    pub flips: Vec<Flip>,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        AugmentationConfig {
            translations_px: vec![1, 2, 3, 4],
            rotations_deg: vec![-3.0, -2.0, -1.0, 1.0, 2.0, 3.0],
            flips: vec![Flip::Horizontal, Flip::Vertical],
        }
    }
}

impl AugmentationConfig {
    pub fn variants_per_input(&self) -> usize {
        4 * self.translations_px.len() + self.rotations_deg.len() + self.flips.len()
    }

    fn validate(&self) -> Result<()> {
        if self.rotations_deg.iter().any(|&r| r == 0.0 || !r.is_finite()) {
            return Err(OmrError::ConfigInvalid(
                "rotation angles must be finite and non-zero".into(),
            ));
        }
        if self.translations_px.contains(&0) {
            return Err(OmrError::ConfigInvalid("translations must be ≥ 1 px".into()));
        }
        Ok(())
    }
}

/// Translated, rotated and flipped copies of `roi` (the original is not
/// included). Exposed pixels are white; every copy keeps the input size.
pub fn augment_crossed_out(roi: &RoiImage, config: &AugmentationConfig) -> Result<Vec<RoiImage>> {
    roi.check()?;
    config.validate()?;
    let img = &roi.pixels;
    let mut out = Vec::with_capacity(config.variants_per_input());
    for &p in &config.translations_px {
        let p = p as i64;
        for (dx, dy) in [(-p, 0), (p, 0), (0, -p), (0, p)] {
            out.push(translate(img, dx, dy));
        }
    }
    for &deg in &config.rotations_deg {
        out.push(rotate(img, deg.to_radians()));
    }
    for &f in &config.flips {
        out.push(match f {
            Flip::Horizontal => image::imageops::flip_horizontal(img),
            Flip::Vertical => image::imageops::flip_vertical(img),
        });
    }
    Ok(out
        .into_iter()
        .map(|pixels| match roi.source_box {
            Some(b) => RoiImage::with_box(pixels, b),
            None => RoiImage::new(pixels),
        })
        .collect())
}

fn translate(img: &ColorImage, dx: i64, dy: i64) -> ColorImage {
    let (w, h) = img.dimensions();
    ColorImage::from_fn(w, h, |x, y| {
        let sx = x as i64 - dx;
        let sy = y as i64 - dy;
        if sx < 0 || sy < 0 || sx >= w as i64 || sy >= h as i64 {
            WHITE
        } else {
            *img.get_pixel(sx as u32, sy as u32)
        }
    })
}

fn rotate(img: &ColorImage, radians: f64) -> ColorImage {
    let (w, h) = img.dimensions();
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let (s, c) = radians.sin_cos();
    ColorImage::from_fn(w, h, |x, y| {
        let (u, v) = (x as f64 - cx, y as f64 - cy);
        let sx = c * u + s * v + cx;
        let sy = -s * u + c * v + cy;
        match sample_rgb(img, sx, sy) {
            Some(p) => Rgb([to_u8(p[0]), to_u8(p[1]), to_u8(p[2])]),
            None => WHITE,
        }
    })
}

/// Appends augmented copies of every crossed-out original. New samples get
/// fresh ids and record their source.
pub fn augment_samples(
    samples: &[LabeledSample],
    config: &AugmentationConfig,
) -> Result<Vec<LabeledSample>> {
    let mut out = samples.to_vec();
    let mut next_id = samples.iter().map(|s| s.id + 1).max().unwrap_or(0);
    for s in samples {
        if s.label != AnswerClass::CrossedOut || s.is_augmented() {
            continue;
        }
        for roi in augment_crossed_out(&s.roi, config)? {
            out.push(LabeledSample {
                id: next_id,
                roi,
                augmented_from: Some(s.id),
                ..s.clone()
            });
            next_id += 1;
        }
    }
    Ok(out)
}
