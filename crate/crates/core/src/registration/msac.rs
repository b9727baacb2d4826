//! M-estimator sample consensus over affine models. Hypotheses come from
//! random minimal samples of three correspondences; each is scored by the
//! truncated quadratic loss `Σ min(e², t²)` and the best one is refined by
//! least squares on its inliers.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::detector::Keypoint;
use super::matching::MatchSet;
use super::transform::Transform;
use crate::error::{OmrError, Result};

pub const MINIMAL_SAMPLE: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MsacConfig {
    pub threshold_px: f64,
    pub max_iterations: usize,
    pub min_inliers: usize,
    pub confidence: f64,
    pub seed: u64,
}

impl Default for MsacConfig {
    fn default() -> Self {
        MsacConfig {
            threshold_px: 3.0,
            max_iterations: 2000,
            min_inliers: 10,
            confidence: 0.99,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Estimate {
    /// Maps sheet coordinates to reference coordinates.
    pub transform: Transform,
    /// Indices into the correspondence list.
    pub inliers: Vec<usize>,
    pub mean_error: f64,
    pub iterations: usize,
}

/// Robust affine fit of `reference ≈ T(sheet)` from matched keypoints.
pub fn estimate_transform(
    matches: &MatchSet,
    sheet_kps: &[Keypoint],
    ref_kps: &[Keypoint],
    config: &MsacConfig,
) -> Result<Estimate> {
    let mut src = Vec::with_capacity(matches.len());
    let mut dst = Vec::with_capacity(matches.len());
    for m in &matches.pairs {
        let (Some(s), Some(r)) = (sheet_kps.get(m.sheet), ref_kps.get(m.reference)) else {
            return Err(OmrError::ConfigInvalid(format!(
                "match ({}, {}) indexes past the keypoint lists",
                m.sheet, m.reference
            )));
        };
        src.push((s.x, s.y));
        dst.push((r.x, r.y));
    }
    estimate_from_points(&src, &dst, config)
}

pub fn estimate_from_points(
    src: &[(f64, f64)],
    dst: &[(f64, f64)],
    config: &MsacConfig,
) -> Result<Estimate> {
    let n = src.len();
    if n < MINIMAL_SAMPLE {
        return Err(OmrError::InsufficientMatches {
            found: n,
            needed: MINIMAL_SAMPLE,
        });
    }
    let t2 = config.threshold_px * config.threshold_px;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut best: Option<(f64, Transform, usize)> = None;
    let mut needed = config.max_iterations;
    let mut iterations = 0;
    let mut s3 = [(0.0, 0.0); 3];
    let mut d3 = [(0.0, 0.0); 3];
    while iterations < needed.min(config.max_iterations) {
        iterations += 1;
        let idx = sample(&mut rng, n, MINIMAL_SAMPLE);
        for (k, i) in idx.iter().enumerate() {
            s3[k] = src[i];
            d3[k] = dst[i];
        }
        if triangle_area(&s3) < 1.0 || triangle_area(&d3) < 1.0 {
            continue;
        }
        let Some(model) = Transform::fit_affine(&s3, &d3) else {
            continue;
        };
        let (cost, count) = score(&model, src, dst, t2);
        if best.as_ref().is_none_or(|b| cost < b.0) {
            best = Some((cost, model, count));
            let w = count as f64 / n as f64;
            needed = adaptive_iterations(w, config.confidence, config.max_iterations);
        }
    }
    let Some((_, mut model, _)) = best else {
        return Err(OmrError::NoConsensus {
            best_inliers: 0,
            needed: config.min_inliers,
        });
    };

    let mut inliers = inlier_indices(&model, src, dst, config.threshold_px);
    for _ in 0..5 {
        if inliers.len() < MINIMAL_SAMPLE {
            break;
        }
        let s: Vec<_> = inliers.iter().map(|&i| src[i]).collect();
        let d: Vec<_> = inliers.iter().map(|&i| dst[i]).collect();
        let Some(refined) = Transform::fit_affine(&s, &d) else {
            break;
        };
        let next = inlier_indices(&refined, src, dst, config.threshold_px);
        if next.len() < inliers.len() {
            break;
        }
        let stable = next == inliers;
        model = refined;
        inliers = next;
        if stable {
            break;
        }
    }
    if inliers.len() < config.min_inliers.max(MINIMAL_SAMPLE) {
        return Err(OmrError::NoConsensus {
            best_inliers: inliers.len(),
            needed: config.min_inliers,
        });
    }
    let mean_error = inliers
        .iter()
        .map(|&i| reprojection_error(&model, src[i], dst[i]))
        .sum::<f64>()
        / inliers.len() as f64;
    Ok(Estimate {
        transform: model,
        inliers,
        mean_error,
        iterations,
    })
}

fn adaptive_iterations(inlier_ratio: f64, confidence: f64, cap: usize) -> usize {
    let p = inlier_ratio.powi(MINIMAL_SAMPLE as i32);
    if p >= 1.0 - f64::EPSILON {
        return 1;
    }
    if p <= 0.0 {
        return cap;
    }
    let k = (1.0 - confidence).ln() / (1.0 - p).ln();
    if k.is_finite() {
        (k.ceil() as usize).clamp(1, cap)
    } else {
        cap
    }
}

fn triangle_area(p: &[(f64, f64); 3]) -> f64 {
    0.5 * ((p[1].0 - p[0].0) * (p[2].1 - p[0].1) - (p[2].0 - p[0].0) * (p[1].1 - p[0].1)).abs()
}

#[inline]
pub fn reprojection_error(t: &Transform, s: (f64, f64), d: (f64, f64)) -> f64 {
    let (x, y) = t.apply(s.0, s.1);
    ((x - d.0).powi(2) + (y - d.1).powi(2)).sqrt()
}

fn score(t: &Transform, src: &[(f64, f64)], dst: &[(f64, f64)], t2: f64) -> (f64, usize) {
    let mut cost = 0.0;
    let mut count = 0;
    for (s, d) in src.iter().zip(dst) {
        let (x, y) = t.apply(s.0, s.1);
        let e2 = (x - d.0).powi(2) + (y - d.1).powi(2);
        if e2 < t2 {
            cost += e2;
            count += 1;
        } else {
            cost += t2;
        }
    }
    (cost, count)
}

fn inlier_indices(t: &Transform, src: &[(f64, f64)], dst: &[(f64, f64)], thr: f64) -> Vec<usize> {
    (0..src.len())
        .filter(|&i| reprojection_error(t, src[i], dst[i]) < thr)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn grid(n: usize) -> Vec<(f64, f64)> {
        (0..n)
            .map(|i| ((i % 7) as f64 * 53.0 + 11.0, (i / 7) as f64 * 41.0 + 5.0))
            .collect()
    }

    #[test]
    fn identity_is_recovered() {
        let pts = grid(30);
        let est = estimate_from_points(&pts, &pts, &MsacConfig::default()).unwrap();
        let id = Transform::identity();
        for i in 0..3 {
            for j in 0..3 {
                assert!((est.transform.matrix()[i][j] - id.matrix()[i][j]).abs() < 1e-6);
            }
        }
        assert_eq!(est.inliers.len(), 30);
    }

    #[test]
    fn translation_is_recovered() {
        let src = grid(25);
        let dst: Vec<_> = src.iter().map(|&(x, y)| (x + 10.0, y - 4.0)).collect();
        let est = estimate_from_points(&src, &dst, &MsacConfig::default()).unwrap();
        let [tx, ty] = est.transform.translation_part();
        assert!((tx - 10.0).abs() < 0.01 && (ty + 4.0).abs() < 0.01);
        let r = est.transform.linear();
        assert!((r[0][0] - 1.0).abs() < 1e-3 && r[0][1].abs() < 1e-3);
        assert!(r[1][0].abs() < 1e-3 && (r[1][1] - 1.0).abs() < 1e-3);
    }

    #[test]
    fn rotation_with_outliers() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let truth = Transform::rotation_about(2f64.to_radians(), (320.0, 440.0), (5.0, 7.0));
        let mut src = Vec::new();
        let mut dst = Vec::new();
        for i in 0..100 {
            let p = (rng.random_range(0.0..640.0), rng.random_range(0.0..880.0));
            src.push(p);
            if i % 5 == 0 {
                dst.push((rng.random_range(0.0..640.0), rng.random_range(0.0..880.0)));
            } else {
                dst.push(truth.apply(p.0, p.1));
            }
        }
        let est = estimate_from_points(&src, &dst, &MsacConfig::default()).unwrap();
        let err: f64 = (0..100)
            .filter(|i| i % 5 != 0)
            .map(|i| reprojection_error(&est.transform, src[i], truth.apply(src[i].0, src[i].1)))
            .sum::<f64>()
            / 80.0;
        assert!(err < 0.5, "mean error {err}");
    }

    #[test]
    fn too_few_matches() {
        let pts = grid(2);
        assert!(matches!(
            estimate_from_points(&pts, &pts, &MsacConfig::default()),
            Err(OmrError::InsufficientMatches { found: 2, .. })
        ));
    }

    #[test]
    fn random_pairs_have_no_consensus() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let src: Vec<_> = (0..12)
            .map(|_| (rng.random_range(0.0..600.0), rng.random_range(0.0..800.0)))
            .collect();
        let dst: Vec<_> = (0..12)
            .map(|_| (rng.random_range(0.0..600.0), rng.random_range(0.0..800.0)))
            .collect();
        assert!(matches!(
            estimate_from_points(&src, &dst, &MsacConfig::default()),
            Err(OmrError::NoConsensus { .. })
        ));
    }

    #[test]
    fn noiseless_affine_recovered_over_seeds() {
        for seed in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let truth = Transform::from_affine(
                [
                    [rng.random_range(0.9..1.1), rng.random_range(-0.1..0.1)],
                    [rng.random_range(-0.1..0.1), rng.random_range(0.9..1.1)],
                ],
                [rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0)],
            );
            let src: Vec<_> = (0..40)
                .map(|_| (rng.random_range(0.0..640.0), rng.random_range(0.0..880.0)))
                .collect();
            let dst: Vec<_> = src.iter().map(|&(x, y)| truth.apply(x, y)).collect();
            let cfg = MsacConfig { seed, ..Default::default() };
            let est = estimate_from_points(&src, &dst, &cfg).unwrap();
            for i in 0..3 {
                for j in 0..3 {
                    assert!((est.transform.matrix()[i][j] - truth.matrix()[i][j]).abs() < 1e-3);
                }
            }
            assert_eq!(est.transform.matrix()[2], [0.0, 0.0, 1.0]);
        }
    }
}
