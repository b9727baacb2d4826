use serde::{Deserialize, Serialize};

use super::classes::{AnswerClass, ClassSet, ClassScores};
use crate::features::RoiImage;
use crate::raster::to_gray;

pub const DEFAULT_BLACK_FRACTION: f64 = 0.5;

/// Otsu binarization followed by a black-pixel-fraction threshold. Only
/// tells filled from unfilled boxes; it has no notion of a crossed-out mark.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ThresholdClassifier {
    pub t: f64,
}

impl Default for ThresholdClassifier {
    fn default() -> Self {
        ThresholdClassifier {
            t: DEFAULT_BLACK_FRACTION,
        }
    }
}

impl ThresholdClassifier {
    pub fn classes(&self) -> ClassSet {
        ClassSet::CONFIRMED_EMPTY
    }

    pub fn classify(&self, roi: &RoiImage) -> ClassScores {
        classify_threshold_otsu(roi, self.t)
    }
}

/// Otsu's threshold on 256 gray levels: pixels at or below it are black.
/// A single-level image has no split; mid-gray is used instead.
pub fn otsu_threshold(histogram: &[u64; 256]) -> u8 {
    let total: u64 = histogram.iter().sum();
    if histogram.iter().filter(|&&h| h > 0).count() < 2 {
        return 127;
    }
    let sum_all: f64 = histogram.iter().enumerate().map(|(i, &h)| i as f64 * h as f64).sum();
    let (mut w0, mut sum0) = (0.0, 0.0);
    let mut best = (0u8, f64::NEG_INFINITY);
    for (t, &h) in histogram.iter().enumerate().take(255) {
        w0 += h as f64;
        sum0 += t as f64 * h as f64;
        let w1 = total as f64 - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let m0 = sum0 / w0;
        let m1 = (sum_all - sum0) / w1;
        let between = w0 * w1 * (m0 - m1).powi(2);
        if between > best.1 {
            best = (t as u8, between);
        }
    }
    best.0
}

pub fn black_fraction(roi: &RoiImage) -> f64 {
    let gray = to_gray(&roi.pixels);
    let mut hist = [0u64; 256];
    for p in gray.pixels() {
        hist[p[0] as usize] += 1;
    }
    let t = otsu_threshold(&hist);
    let black: u64 = hist[..=t as usize].iter().sum();
    black as f64 / gray.len().max(1) as f64
}

/// Confirmed when the black fraction exceeds `t`, otherwise Empty.
pub fn classify_threshold_otsu(roi: &RoiImage, t: f64) -> ClassScores {
    let f = black_fraction(roi);
    let predicted = if f > t {
        AnswerClass::Confirmed
    } else {
        AnswerClass::Empty
    };
    let p_confirmed = f.clamp(0.0, 1.0);
    ClassScores {
        scores: vec![
            (AnswerClass::Confirmed, p_confirmed),
            (AnswerClass::Empty, 1.0 - p_confirmed),
        ],
        predicted,
        confidence: ((f - t).abs() * 2.0).clamp(0.0, 1.0),
    }
}
