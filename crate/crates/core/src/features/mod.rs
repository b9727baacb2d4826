//! Numeric representations of an answer-box crop: the 12-value handcrafted
//! vector (gradient statistics plus HoG summaries), the local-descriptor bag
//! used by the visual-word model, and per-channel mean intensity.

mod gradient;
mod hog;

use std::hash::{DefaultHasher, Hash, Hasher};
use std::sync::{Arc, OnceLock};

use serde::{Deserialize, Serialize};

pub use gradient::gradient_magnitude;
pub use hog::{hog_features, Hog, HogConfig};

use crate::dataset::RoiBox;
use crate::error::{OmrError, Result};
use crate::raster::{resize_rgb, ColorImage, Plane};
use crate::registration::{detect_unchecked, DetectorConfig};

pub const MIN_ROI_SIDE: u32 = 4;
pub const CANONICAL_SIZE: u32 = 227;
pub const HANDCRAFTED_LEN: usize = 12;

/// One cropped answer box. Clones share a feature cache that is keyed by a
/// hash of the pixels, so editing `pixels` never yields stale features.
#[derive(Debug, Clone)]
pub struct RoiImage {
    pub pixels: ColorImage,
    pub source_box: Option<RoiBox>,
    cache: Arc<FeatureCache>,
}

#[derive(Debug, Default)]
struct FeatureCache {
    handcrafted: OnceLock<(u64, HandcraftedVector)>,
    bag: OnceLock<(u64, BagConfig, DescriptorBag)>,
}

impl PartialEq for RoiImage {
    fn eq(&self, other: &Self) -> bool {
        self.pixels == other.pixels && self.source_box == other.source_box
    }
}

impl RoiImage {
    pub fn new(pixels: ColorImage) -> Self {
        RoiImage {
            pixels,
            source_box: None,
            cache: Arc::default(),
        }
    }

    pub fn with_box(pixels: ColorImage, source_box: RoiBox) -> Self {
        RoiImage {
            pixels,
            source_box: Some(source_box),
            cache: Arc::default(),
        }
    }

    fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.pixels.dimensions().hash(&mut h);
        self.pixels.as_raw().hash(&mut h);
        h.finish()
    }

    pub fn width(&self) -> u32 {
        self.pixels.width()
    }

    pub fn height(&self) -> u32 {
        self.pixels.height()
    }

    pub fn gray(&self) -> Plane {
        Plane::luma(&self.pixels)
    }

    pub(crate) fn check(&self) -> Result<()> {
        let (w, h) = self.pixels.dimensions();
        if w < MIN_ROI_SIDE || h < MIN_ROI_SIDE {
            return Err(OmrError::DegenerateRoi {
                width: w,
                height: h,
            });
        }
        Ok(())
    }
}

/// Bilinear resize to `size`×`size`.
pub fn standardize_roi(roi: &RoiImage, size: u32) -> Result<RoiImage> {
    roi.check()?;
    if size < MIN_ROI_SIDE {
        return Err(OmrError::ConfigInvalid(format!("canonical size {size} < 4")));
    }
    Ok(RoiImage {
        pixels: resize_rgb(&roi.pixels, size, size),
        source_box: roi.source_box,
        cache: Arc::default(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HandcraftedVector(pub [f64; HANDCRAFTED_LEN]);

impl HandcraftedVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// `[max g, median g, mean g, h₁ … h₉]` with `g` the L1 gradient magnitude of
/// the 227×227 gray crop and `h` the HoG summaries.
pub fn handcrafted_vector(roi: &RoiImage) -> Result<HandcraftedVector> {
    let key = roi.fingerprint();
    if let Some((k, v)) = roi.cache.handcrafted.get() {
        if *k == key {
            return Ok(*v);
        }
    }
    let v = compute_handcrafted(roi)?;
    let _ = roi.cache.handcrafted.set((key, v));
    Ok(v)
}

fn compute_handcrafted(roi: &RoiImage) -> Result<HandcraftedVector> {
    let std = standardize_roi(roi, CANONICAL_SIZE)?;
    let gray = std.gray();
    let g = gradient_magnitude(&gray)?;
    let mut sorted = g.data().to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let max = sorted[n - 1];
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    };
    let mean = g.data().iter().sum::<f64>() / n as f64;
    let hog = hog_features(&gray, &HogConfig::default())?;
    let mut v = [0.0; HANDCRAFTED_LEN];
    v[0] = max;
    v[1] = median;
    v[2] = mean;
    v[3..].copy_from_slice(&hog.summary);
    Ok(HandcraftedVector(v))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BagConfig {
    /// Side of the standardized crop descriptors are extracted from.
    pub size: u32,
    pub detector: DetectorConfig,
}

impl Default for BagConfig {
    fn default() -> Self {
        BagConfig {
            size: 64,
            detector: DetectorConfig::roi(),
        }
    }
}

/// Local descriptors of one crop. Empty for featureless (blank) boxes.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DescriptorBag {
    pub descriptors: Vec<Vec<f64>>,
    /// Keypoint locations in standardized-crop pixels.
    pub positions: Vec<(f64, f64)>,
}

impl DescriptorBag {
    pub fn len(&self) -> usize {
        self.descriptors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.descriptors.is_empty()
    }
}

pub fn descriptor_bag(roi: &RoiImage, config: &BagConfig) -> Result<DescriptorBag> {
    let key = roi.fingerprint();
    if let Some((k, c, bag)) = roi.cache.bag.get() {
        if *k == key && c == config {
            return Ok(bag.clone());
        }
    }
    let bag = compute_bag(roi, config)?;
    let _ = roi.cache.bag.set((key, config.clone(), bag.clone()));
    Ok(bag)
}

fn compute_bag(roi: &RoiImage, config: &BagConfig) -> Result<DescriptorBag> {
    let std = standardize_roi(roi, config.size)?;
    let kps = detect_unchecked(&std.gray(), &config.detector)?;
    Ok(DescriptorBag {
        positions: kps.iter().map(|k| (k.x, k.y)).collect(),
        descriptors: kps.into_iter().map(|k| k.descriptor).collect(),
    })
}

/// Per-channel mean scaled to [0, 1].
pub fn mean_intensity(roi: &RoiImage) -> [f64; 3] {
    let n = (roi.width() as f64 * roi.height() as f64).max(1.0);
    let mut sums = [0.0; 3];
    for p in roi.pixels.pixels() {
        for c in 0..3 {
            sums[c] += p[c] as f64;
        }
    }
    sums.map(|s| s / n / 255.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::{Rgb, WHITE};

    fn solid(w: u32, h: u32, v: u8) -> RoiImage {
        RoiImage::new(ColorImage::from_pixel(w, h, Rgb([v, v, v])))
    }

    #[test]
    fn standardize_identity_at_canonical_size() {
        let img = ColorImage::from_fn(227, 227, |x, y| Rgb([x as u8, y as u8, (x ^ y) as u8]));
        let roi = RoiImage::new(img.clone());
        assert_eq!(standardize_roi(&roi, 227).unwrap().pixels, img);
    }

    #[test]
    fn standardize_shapes_and_constants() {
        let out = standardize_roi(&solid(10, 20, 128), 64).unwrap();
        assert_eq!(out.pixels.dimensions(), (64, 64));
        assert!(out.pixels.pixels().all(|p| (p[0] as i32 - 128).abs() <= 1));
    }

    #[test]
    fn degenerate_roi_rejected() {
        assert!(matches!(
            standardize_roi(&solid(3, 10, 0), 64),
            Err(OmrError::DegenerateRoi { .. })
        ));
    }

    #[test]
    fn blank_box_vector_is_zero() {
        let v = handcrafted_vector(&solid(30, 30, 255)).unwrap();
        assert!(v.0.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn bordered_box_has_gradient_stats() {
        let img = ColorImage::from_fn(40, 40, |x, y| {
            if x < 2 || y < 2 || x >= 38 || y >= 38 {
                Rgb([0, 0, 0])
            } else {
                WHITE
            }
        });
        let v = handcrafted_vector(&RoiImage::new(img)).unwrap();
        assert!(v.0[0] > 0.0 && v.0[2] > 0.0);
        assert!(v.0.iter().all(|&x| x.is_finite() && x >= 0.0));
    }

    #[test]
    fn mean_intensity_cases() {
        assert_eq!(mean_intensity(&solid(8, 8, 255)), [1.0, 1.0, 1.0]);
        assert_eq!(mean_intensity(&solid(8, 8, 0)), [0.0, 0.0, 0.0]);
        let half = RoiImage::new(ColorImage::from_fn(8, 8, |x, _| {
            if x < 4 {
                Rgb([0, 0, 0])
            } else {
                WHITE
            }
        }));
        for c in mean_intensity(&half) {
            assert!((c - 0.5).abs() < 0.01);
        }
    }

    #[test]
    fn blank_crop_has_empty_bag() {
        let bag = descriptor_bag(&solid(30, 30, 250), &BagConfig::default()).unwrap();
        assert!(bag.is_empty());
    }
}
