use serde::{Deserialize, Serialize};

use super::detector::Keypoint;
use crate::error::{OmrError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Match {
    pub sheet: usize,
    pub reference: usize,
    pub distance: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MatchSet {
    pub pairs: Vec<Match>,
}

impl MatchSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

pub const DEFAULT_RATIO: f64 = 0.7;

/// Exhaustive nearest-neighbour matching with the distance-ratio test: a
/// sheet keypoint is kept when its nearest reference descriptor is closer
/// than `ratio` times the second nearest.
pub fn match_features(sheet: &[Keypoint], reference: &[Keypoint], ratio: f64) -> Result<MatchSet> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(OmrError::ConfigInvalid(format!("ratio {ratio} outside (0, 1]")));
    }
    let Some(len) = sheet.first().map(|k| k.descriptor.len()) else {
        return Ok(MatchSet::default());
    };
    for k in sheet.iter().chain(reference) {
        if k.descriptor.len() != len {
            return Err(OmrError::DescriptorMismatch {
                left: len,
                right: k.descriptor.len(),
            });
        }
    }
    let mut pairs = Vec::new();
    for (i, kp) in sheet.iter().enumerate() {
        let mut best = (f64::INFINITY, usize::MAX);
        let mut second = f64::INFINITY;
        for (j, r) in reference.iter().enumerate() {
            let d = squared_distance(&kp.descriptor, &r.descriptor);
            if d < best.0 {
                second = best.0;
                best = (d, j);
            } else if d < second {
                second = d;
            }
        }
        if best.1 == usize::MAX {
            continue;
        }
        let (d1, d2) = (best.0.sqrt(), second.sqrt());
        if d1 < ratio * d2 {
            pairs.push(Match {
                sheet: i,
                reference: best.1,
                distance: d1,
            });
        }
    }
    Ok(MatchSet { pairs })
}

#[inline]
pub(crate) fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kp(desc: Vec<f64>) -> Keypoint {
        let n = desc.iter().map(|v| v * v).sum::<f64>().sqrt();
        Keypoint {
            x: 0.0,
            y: 0.0,
            scale: 1.0,
            orientation: 0.0,
            response: 1.0,
            descriptor: desc.into_iter().map(|v| v / n).collect(),
        }
    }

    #[test]
    fn identical_lists_match_themselves() {
        let kps: Vec<_> = (0..6)
            .map(|i| kp((0..8).map(|j| if j == i { 1.0 } else { 0.1 * (j + 1) as f64 }).collect()))
            .collect();
        let m = match_features(&kps, &kps, 0.8).unwrap();
        assert_eq!(m.len(), kps.len());
        for p in &m.pairs {
            assert_eq!(p.sheet, p.reference);
            assert_eq!(p.distance, 0.0);
        }
    }

    #[test]
    fn empty_sheet_gives_empty_set() {
        let r = vec![kp(vec![1.0, 0.0])];
        assert!(match_features(&[], &r, 0.7).unwrap().is_empty());
    }

    #[test]
    fn mismatched_lengths_error() {
        let a = vec![kp(vec![1.0, 0.0])];
        let b = vec![kp(vec![1.0, 0.0, 0.0])];
        assert!(matches!(
            match_features(&a, &b, 0.7),
            Err(OmrError::DescriptorMismatch { .. })
        ));
    }

    #[test]
    fn hand_built_ratio_case() {
        // Unit vectors in 2-D given by angle. Reference at 0°, 90°, 180°, 270°, 45°.
        let unit = |deg: f64| {
            let r = deg.to_radians();
            kp(vec![r.cos(), r.sin()])
        };
        let reference: Vec<_> = [0.0, 90.0, 180.0, 270.0, 45.0].map(unit).into();
        // Sheet: 2° (clear match to 0°), 22.5° (tie between 0° and 45°),
        // 92° (clear), 200° (20° from 180°, 70° from 270°), 225° (equidistant from 180° and 270°)
        let sheet: Vec<_> = [2.0, 22.5, 92.0, 200.0, 225.0].map(unit).into();
        // brute-force the expected outcome from the chord distances
        let chord = |a: f64, b: f64| 2.0 * ((a - b).to_radians().abs() / 2.0).sin();
        let mut expected = Vec::new();
        for (i, s) in [2.0f64, 22.5, 92.0, 200.0, 225.0].iter().enumerate() {
            let mut d: Vec<(f64, usize)> = [0.0f64, 90.0, 180.0, 270.0, 45.0]
                .iter()
                .enumerate()
                .map(|(j, r)| (chord(*s, *r), j))
                .collect();
            d.sort_by(|a, b| a.0.total_cmp(&b.0));
            if d[0].0 < 0.7 * d[1].0 {
                expected.push((i, d[0].1));
            }
        }
        assert_eq!(expected, vec![(0, 0), (2, 1), (3, 2)]);
        let got: Vec<_> = match_features(&sheet, &reference, 0.7)
            .unwrap()
            .pairs
            .iter()
            .map(|p| (p.sheet, p.reference))
            .collect();
        assert_eq!(got, expected);
    }
}
