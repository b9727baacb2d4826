//! Aligns a scanned sheet to the model-answer reference: detect features on
//! the gray sheet, match them against the reference features, fit an affine
//! map with MSAC and resample the color sheet into reference coordinates.

mod detector;
mod matching;
mod msac;
mod transform;

use serde::{Deserialize, Serialize};

pub use detector::{
    angle_diff, detect_features, DetectorConfig, Keypoint, DESCRIPTOR_LEN, HARRIS_SURF64,
};
pub(crate) use detector::detect_unchecked;
pub(crate) use matching::squared_distance;
pub use matching::{match_features, Match, MatchSet, DEFAULT_RATIO};
pub use msac::{estimate_from_points, estimate_transform, reprojection_error, Estimate, MsacConfig};
pub use transform::Transform;

use crate::error::{OmrError, Result};
use crate::raster::{check_nonempty, sample_rgb, to_u8, ColorImage, Plane, Rgb, WHITE};

/// Resamples `image` into the frame of `t` (which maps source to output
/// coordinates) with bilinear interpolation. Pixels that fall outside the
/// source are white.
pub fn warp(image: &ColorImage, t: &Transform, out_size: (u32, u32)) -> Result<ColorImage> {
    let inv = t.inverse()?;
    let (w, h) = out_size;
    Ok(ColorImage::from_fn(w, h, |x, y| {
        let (sx, sy) = inv.apply(x as f64, y as f64);
        match sample_rgb(image, sx, sy) {
            Some(p) => Rgb([to_u8(p[0]), to_u8(p[1]), to_u8(p[2])]),
            None => WHITE,
        }
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegistrationConfig {
    pub detector: DetectorConfig,
    pub ratio: f64,
    pub msac: MsacConfig,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        RegistrationConfig {
            detector: DetectorConfig::default(),
            ratio: DEFAULT_RATIO,
            msac: MsacConfig::default(),
        }
    }
}

/// Features of the model-answer image, extracted once per exam and shared
/// read-only by every registration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceFeatures {
    pub detector: DetectorConfig,
    pub width: u32,
    pub height: u32,
    pub keypoints: Vec<Keypoint>,
}

impl ReferenceFeatures {
    pub fn extract(reference: &ColorImage, detector: &DetectorConfig) -> Result<Self> {
        let (width, height) = reference.dimensions();
        check_nonempty(width, height)?;
        let keypoints = detect_features(&Plane::luma(reference), detector)?;
        Ok(ReferenceFeatures {
            detector: detector.clone(),
            width,
            height,
            keypoints,
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RegistrationReport {
    pub sheet_keypoints: usize,
    pub reference_keypoints: usize,
    pub matches: usize,
    pub inliers: usize,
    pub mean_reprojection_error: f64,
}

impl RegistrationReport {
    pub fn inlier_ratio(&self) -> f64 {
        if self.matches == 0 {
            0.0
        } else {
            self.inliers as f64 / self.matches as f64
        }
    }
}

#[derive(Debug, Clone)]
pub struct Registration {
    pub image: ColorImage,
    pub transform: Transform,
    pub report: RegistrationReport,
}

pub fn register_sheet(
    sheet: &ColorImage,
    reference: &ReferenceFeatures,
    config: &RegistrationConfig,
) -> Result<Registration> {
    if config.detector != reference.detector {
        return Err(OmrError::DetectorMismatch {
            left: format!("{:?}", config.detector),
            right: format!("{:?}", reference.detector),
        });
    }
    let (w, h) = sheet.dimensions();
    check_nonempty(w, h)?;
    let gray = Plane::luma(sheet);
    let sheet_kps = detect_features(&gray, &config.detector)?;
    let matches = match_features(&sheet_kps, &reference.keypoints, config.ratio)?;
    let estimate = estimate_transform(&matches, &sheet_kps, &reference.keypoints, &config.msac)
        .map_err(|e| match e {
            OmrError::NoConsensus { .. } | OmrError::InsufficientMatches { .. } => {
                OmrError::RegistrationFailed(Box::new(e))
            }
            other => other,
        })?;
    let image = warp(sheet, &estimate.transform, (reference.width, reference.height))?;
    Ok(Registration {
        image,
        transform: estimate.transform,
        report: RegistrationReport {
            sheet_keypoints: sheet_kps.len(),
            reference_keypoints: reference.keypoints.len(),
            matches: matches.len(),
            inliers: estimate.inliers.len(),
            mean_reprojection_error: estimate.mean_error,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient_image(w: u32, h: u32) -> ColorImage {
        ColorImage::from_fn(w, h, |x, y| {
            Rgb([(x * 7 % 256) as u8, (y * 5 % 256) as u8, ((x + y) % 256) as u8])
        })
    }

    #[test]
    fn identity_warp_is_exact() {
        let img = gradient_image(40, 30);
        let out = warp(&img, &Transform::identity(), (40, 30)).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn integer_translation_is_exact_on_overlap() {
        let img = gradient_image(40, 30);
        let out = warp(&img, &Transform::translation(3.0, -2.0), (40, 30)).unwrap();
        for y in 0..28 {
            for x in 3..40 {
                assert_eq!(out.get_pixel(x, y), img.get_pixel(x - 3, y + 2));
            }
        }
        // exposed strip is white
        assert_eq!(*out.get_pixel(0, 5), WHITE);
    }

    #[test]
    fn singular_warp_fails() {
        let img = gradient_image(8, 8);
        let t = Transform::from_affine([[0.0, 0.0], [0.0, 0.0]], [0.0, 0.0]);
        assert!(matches!(warp(&img, &t, (8, 8)), Err(OmrError::SingularTransform { .. })));
    }

    #[test]
    fn smooth_round_trip_is_close() {
        let base = Plane::from_fn(120, 100, |x, y| {
            0.5 + 0.4 * ((x as f64 / 9.0).sin() * (y as f64 / 7.0).cos())
        })
        .gaussian_blur(2.0);
        let img = ColorImage::from_fn(120, 100, |x, y| {
            let v = to_u8(base.get(x as usize, y as usize) * 255.0);
            Rgb([v, v, v])
        });
        let t = Transform::rotation_about(0.05, (60.0, 50.0), (2.5, -1.5));
        let fwd = warp(&img, &t, (120, 100)).unwrap();
        let back = warp(&fwd, &t.inverse().unwrap(), (120, 100)).unwrap();
        let mut sum = 0.0;
        let mut n = 0.0;
        for y in 15..85 {
            for x in 15..105 {
                sum += (back.get_pixel(x, y)[0] as f64 - img.get_pixel(x, y)[0] as f64).abs();
                n += 1.0;
            }
        }
        assert!(sum / n < 2.0, "mean abs diff {}", sum / n);
    }

    #[test]
    fn blank_sheet_fails_registration() {
        let reference = ColorImage::from_fn(128, 128, |x, y| {
            if ((x / 16) + (y / 16)) % 2 == 0 {
                WHITE
            } else {
                Rgb([0, 0, 0])
            }
        });
        let feats = ReferenceFeatures::extract(&reference, &DetectorConfig::default()).unwrap();
        let blank = ColorImage::from_pixel(128, 128, WHITE);
        let err = register_sheet(&blank, &feats, &RegistrationConfig::default()).unwrap_err();
        assert_eq!(err.name(), "RegistrationFailed");
    }
}
