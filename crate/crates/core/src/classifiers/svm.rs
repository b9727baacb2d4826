use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::classes::{AnswerClass, ClassSet, ClassScores};
use crate::error::{OmrError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SvmConfig {
    pub lambda: f64,
    pub epochs: usize,
    pub learning_rate: f64,
}

impl Default for SvmConfig {
    fn default() -> Self {
        SvmConfig {
            lambda: 1e-4,
            epochs: 60,
            learning_rate: 0.05,
        }
    }
}

/// One-vs-all linear SVM over z-scored features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearSvm {
    pub classes: ClassSet,
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    /// One weight vector per class of `classes`, in class order.
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<f64>,
}

impl LinearSvm {
    /// Trains with seeded stochastic subgradient descent on the
    /// class-balanced hinge loss plus `lambda/2 · |w|²` (bias unregularized).
    pub fn train(
        features: &[Vec<f64>],
        labels: &[AnswerClass],
        classes: ClassSet,
        config: &SvmConfig,
        seed: u64,
    ) -> Result<Self> {
        if features.len() != labels.len() {
            return Err(OmrError::LengthMismatch {
                left: features.len(),
                right: labels.len(),
            });
        }
        check_training_set(labels, classes, 1)?;
        if config.epochs == 0 || !(config.learning_rate > 0.0) || config.lambda < 0.0 {
            return Err(OmrError::ConfigInvalid(
                "svm needs epochs ≥ 1, a positive learning rate and λ ≥ 0".into(),
            ));
        }
        let dim = features[0].len();
        if let Some(bad) = features.iter().find(|f| f.len() != dim) {
            return Err(OmrError::DimensionMismatch {
                expected: dim,
                got: bad.len(),
            });
        }
        let (mean, scale) = standardization(features);
        let x: Vec<Vec<f64>> = features.iter().map(|f| apply_scale(f, &mean, &scale)).collect();
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for (ci, class) in classes.iter().enumerate() {
            let y: Vec<f64> = labels.iter().map(|&l| if l == class { 1.0 } else { -1.0 }).collect();
            let n_pos = y.iter().filter(|&&v| v > 0.0).count() as f64;
            let n = y.len() as f64;
            let cost = [n / (2.0 * (n - n_pos)), n / (2.0 * n_pos)];
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(ci as u64));
            let (w, b) = sgd_hinge(&x, &y, cost, config, &mut rng);
            weights.push(w);
            biases.push(b);
        }
        Ok(LinearSvm {
            classes,
            mean,
            scale,
            weights,
            biases,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn margins(&self, features: &[f64]) -> Result<Vec<f64>> {
        if features.len() != self.dim() {
            return Err(OmrError::DimensionMismatch {
                expected: self.dim(),
                got: features.len(),
            });
        }
        let z = apply_scale(features, &self.mean, &self.scale);
        Ok(self
            .weights
            .iter()
            .zip(&self.biases)
            .map(|(w, b)| dot(w, &z) + b)
            .collect())
    }

    pub fn scores(&self, features: &[f64]) -> Result<ClassScores> {
        Ok(ClassScores::from_margins(self.classes, &self.margins(features)?))
    }

    /// Mean class-balanced hinge loss of one class's machine, without the
    /// regularizer.
    pub fn hinge_loss(&self, features: &[Vec<f64>], labels: &[AnswerClass], class: AnswerClass) -> f64 {
        let Some(ci) = self.classes.position(class) else {
            return f64::NAN;
        };
        let total: f64 = features
            .iter()
            .zip(labels)
            .map(|(f, &l)| {
                let y = if l == class { 1.0 } else { -1.0 };
                let z = apply_scale(f, &self.mean, &self.scale);
                (1.0 - y * (dot(&self.weights[ci], &z) + self.biases[ci])).max(0.0)
            })
            .sum();
        total / features.len().max(1) as f64
    }
}

fn sgd_hinge(x: &[Vec<f64>], y: &[f64], cost: [f64; 2], cfg: &SvmConfig, rng: &mut ChaCha8Rng) -> (Vec<f64>, f64) {
    let dim = x[0].len();
    let mut w = vec![0.0; dim];
    let mut b = 0.0;
    let mut order: Vec<usize> = (0..x.len()).collect();
    let mut t = 0usize;
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        for &i in &order {
            let eta = cfg.learning_rate / (1.0 + cfg.learning_rate * cfg.lambda * t as f64);
            t += 1;
            let c = if y[i] > 0.0 { cost[1] } else { cost[0] };
            let margin = y[i] * (dot(&w, &x[i]) + b);
            let shrink = 1.0 - eta * cfg.lambda;
            for wj in w.iter_mut() {
                *wj *= shrink;
            }
            if margin < 1.0 {
                for (wj, xj) in w.iter_mut().zip(&x[i]) {
                    *wj += eta * c * y[i] * xj;
                }
                b += eta * c * y[i];
            }
        }
    }
    (w, b)
}

pub(crate) fn check_training_set(labels: &[AnswerClass], classes: ClassSet, min_per_class: usize) -> Result<()> {
    for c in classes.iter() {
        let n = labels.iter().filter(|&&l| l == c).count();
        if n < min_per_class.max(1) {
            return Err(OmrError::DegenerateTrainingSet(format!(
                "class {c} has {n} samples, at least {} needed",
                min_per_class.max(1)
            )));
        }
    }
    if let Some(l) = labels.iter().find(|l| !classes.contains(**l)) {
        return Err(OmrError::DegenerateTrainingSet(format!(
            "label {l} is outside the class set {classes}"
        )));
    }
    Ok(())
}

fn standardization(x: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let dim = x[0].len();
    let n = x.len() as f64;
    let mut mean = vec![0.0; dim];
    for f in x {
        for (m, v) in mean.iter_mut().zip(f) {
            *m += v / n;
        }
    }
    let mut var = vec![0.0; dim];
    for f in x {
        for ((s, v), m) in var.iter_mut().zip(f).zip(&mean) {
            *s += (v - m).powi(2) / n;
        }
    }
    let scale = var
        .into_iter()
        .map(|v| if v > 1e-12 { 1.0 / v.sqrt() } else { 1.0 })
        .collect();
    (mean, scale)
}

fn apply_scale(f: &[f64], mean: &[f64], scale: &[f64]) -> Vec<f64> {
    f.iter().zip(mean).zip(scale).map(|((v, m), s)| (v - m) * s).collect()
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
