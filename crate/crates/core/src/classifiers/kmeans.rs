use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{OmrError, Result};
use crate::features::DescriptorBag;
use crate::registration::squared_distance;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KmeansConfig {
    pub k: usize,
    pub max_iterations: usize,
    /// Converged once no center moves farther than this.
    pub tolerance: f64,
    /// Cluster a seeded random subset when there are more descriptors.
    pub max_descriptors: Option<usize>,
}

impl Default for KmeansConfig {
    fn default() -> Self {
        KmeansConfig {
            k: 200,
            max_iterations: 300,
            tolerance: 1e-4,
            max_descriptors: Some(20_000),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub centers: Vec<Vec<f64>>,
    /// Number of descriptors offered for clustering, before subsampling.
    pub source_descriptors: usize,
}

impl Vocabulary {
    pub fn k(&self) -> usize {
        self.centers.len()
    }

    /// Index of the nearest center; the lowest index wins ties.
    pub fn nearest(&self, d: &[f64]) -> usize {
        nearest(&self.centers, d).0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    pub centers: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    /// Within-cluster SSE after each assignment step.
    pub sse_history: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl Clustering {
    pub fn sse(&self) -> f64 {
        self.sse_history.last().copied().unwrap_or(0.0)
    }
}

fn nearest(centers: &[Vec<f64>], d: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centers.iter().enumerate() {
        let dist = squared_distance(c, d);
        if dist < best.1 {
            best = (i, dist);
        }
    }
    best
}

fn distinct_count(points: &[Vec<f64>], limit: usize) -> usize {
    let mut seen: Vec<&Vec<f64>> = Vec::new();
    for p in points {
        if !seen.contains(&p) {
            seen.push(p);
            if seen.len() >= limit {
                break;
            }
        }
    }
    seen.len()
}

/// Lloyd's algorithm with k-means++ seeding. Empty clusters are reseeded
/// at the point farthest from its center.
pub fn kmeans(points: &[Vec<f64>], k: usize, max_iterations: usize, tolerance: f64, seed: u64) -> Result<Clustering> {
    if k < 2 {
        return Err(OmrError::ConfigInvalid("k-means needs k ≥ 2".into()));
    }
    let available = distinct_count(points, k);
    if available < k {
        return Err(OmrError::InsufficientDescriptors { available, needed: k });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = plus_plus(points, k, &mut rng);
    let mut assignments = vec![0usize; points.len()];
    let mut dists = vec![0.0; points.len()];
    let mut sse_history: Vec<f64> = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    while iterations < max_iterations {
        iterations += 1;
        for (i, p) in points.iter().enumerate() {
            let (c, d) = nearest(&centers, p);
            assignments[i] = c;
            dists[i] = d;
        }
        let sse: f64 = dists.iter().sum();
        if let Some(&prev) = sse_history.last() {
            debug_assert!(sse <= prev + 1e-9 * prev.max(1.0), "k-means SSE rose from {prev} to {sse}");
        }
        sse_history.push(sse);

        let dim = points[0].len();
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assignments) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        let mut shift: f64 = 0.0;
        for c in 0..k {
            let new = if counts[c] == 0 {
                let far = (0..points.len())
                    .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)))
                    .expect("points non-empty");
                dists[far] = 0.0;
                points[far].clone()
            } else {
                sums[c].iter().map(|s| s / counts[c] as f64).collect()
            };
            shift = shift.max(squared_distance(&new, &centers[c]).sqrt());
            centers[c] = new;
        }
        if shift < tolerance {
            converged = true;
            break;
        }
    }
    for (i, p) in points.iter().enumerate() {
        assignments[i] = nearest(&centers, p).0;
    }
    let final_sse = points
        .iter()
        .zip(&assignments)
        .map(|(p, &a)| squared_distance(p, &centers[a]))
        .sum();
    sse_history.push(final_sse);
    Ok(Clustering {
        centers,
        assignments,
        sse_history,
        iterations,
        converged,
    })
}

fn plus_plus(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut centers = vec![points[rng.random_range(0..points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| squared_distance(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let mut u = rng.random::<f64>() * total;
        let mut pick = None;
        for (i, &d) in d2.iter().enumerate() {
            if d <= 0.0 {
                continue;
            }
            pick = Some(i);
            if u < d {
                break;
            }
            u -= d;
        }
        let c = points[pick.expect("fewer distinct points than k")].clone();
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(squared_distance(p, &c));
        }
        centers.push(c);
    }
    centers
}

/// Clusters the descriptors of `bags` into a visual vocabulary.
pub fn build_vocabulary(bags: &[DescriptorBag], config: &KmeansConfig, seed: u64) -> Result<Vocabulary> {
    let all: Vec<&Vec<f64>> = bags.iter().flat_map(|b| &b.descriptors).collect();
    let source_descriptors = all.len();
    if source_descriptors < config.k {
        return Err(OmrError::InsufficientDescriptors {
            available: source_descriptors,
            needed: config.k,
        });
    }
    let points: Vec<Vec<f64>> = match config.max_descriptors {
        Some(cap) if cap < all.len() => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5eed);
            let mut idx = sample(&mut rng, all.len(), cap.max(config.k)).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|i| all[i].clone()).collect()
        }
        _ => all.into_iter().cloned().collect(),
    };
    let clustering = kmeans(&points, config.k, config.max_iterations, config.tolerance, seed)?;
    Ok(Vocabulary {
        centers: clustering.centers,
        source_descriptors,
    })
}

/// L1-normalized histogram of nearest visual words; all zeros for an
/// empty bag.
pub fn encode_bovw(vocab: &Vocabulary, bag: &DescriptorBag) -> Vec<f64> {
    let mut hist = vec![0.0; vocab.k()];
    for d in &bag.descriptors {
        hist[vocab.nearest(d)] += 1.0;
    }
    let n = bag.descriptors.len();
    if n > 0 {
        hist.iter_mut().for_each(|h| *h /= n as f64);
    }
    hist
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    fn bag(descriptors: Vec<Vec<f64>>) -> DescriptorBag {
        DescriptorBag {
            positions: vec![(0.0, 0.0); descriptors.len()],
            descriptors,
        }
    }

    #[test]
    fn duplicated_points_become_centers() {
        let distinct = [vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 3.0]];
        let pts: Vec<_> = (0..30).map(|i| distinct[i % 3].clone()).collect();
        let c = kmeans(&pts, 3, 300, 1e-4, 7).unwrap();
        for d in &distinct {
            assert!(c.centers.iter().any(|x| squared_distance(x, d).sqrt() < 1e-6));
        }
    }

    #[test]
    fn two_blobs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = Normal::new(0.0, 0.3).unwrap();
        let mut pts = Vec::new();
        for i in 0..400 {
            let m = if i % 2 == 0 { [-5.0, 2.0] } else { [5.0, -1.0] };
            pts.push(vec![m[0] + n.sample(&mut rng), m[1] + n.sample(&mut rng)]);
        }
        let c = kmeans(&pts, 2, 300, 1e-4, 0).unwrap();
        assert!(c.converged);
        for m in [[-5.0, 2.0], [5.0, -1.0]] {
            assert!(c.centers.iter().any(|x| squared_distance(x, &m).sqrt() < 0.1));
        }
    }

    #[test]
    fn sse_non_increasing() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pts: Vec<Vec<f64>> = (0..500)
            .map(|_| (0..4).map(|_| rng.random::<f64>()).collect())
            .collect();
        let c = kmeans(&pts, 12, 300, 1e-6, 2).unwrap();
        for w in c.sse_history.windows(2) {
            assert!(w[1] <= w[0] + 1e-9);
        }
    }

    #[test]
    fn too_few_distinct() {
        let pts = vec![vec![1.0]; 10];
        assert!(matches!(
            kmeans(&pts, 2, 10, 1e-4, 0),
            Err(OmrError::InsufficientDescriptors { available: 1, needed: 2 })
        ));
    }

    #[test]
    fn encode_edge_cases() {
        let vocab = Vocabulary {
            centers: vec![vec![0.0, 0.0], vec![1.0, 1.0], vec![5.0, 0.0]],
            source_descriptors: 0,
        };
        assert_eq!(encode_bovw(&vocab, &bag(vec![])), vec![0.0; 3]);
        let uniform = encode_bovw(&vocab, &bag(vocab.centers.clone()));
        assert!(uniform.iter().all(|&h| (h - 1.0 / 3.0).abs() < 1e-15));
    }
}
