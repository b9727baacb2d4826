use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::classes::{AnswerClass, ClassSet, ClassScores};
use super::svm::check_training_set;
use crate::error::{OmrError, Result};

pub const VARIANCE_FLOOR: f64 = 1e-6;

/// Gaussian naive Bayes over fixed-length feature vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NbcModel {
    pub classes: ClassSet,
    /// `[class][feature]`, classes in set order.
    pub means: Vec<Vec<f64>>,
    pub variances: Vec<Vec<f64>>,
    pub priors: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NbcConfig {
    /// Fixed priors for some classes; the remaining mass is shared by the
    /// other classes in proportion to their frequencies.
    pub prior_override: BTreeMap<AnswerClass, f64>,
}

impl NbcConfig {
    pub fn with_prior(class: AnswerClass, p: f64) -> Self {
        NbcConfig {
            prior_override: [(class, p)].into_iter().collect(),
        }
    }
}

pub fn train_nbc(
    features: &[Vec<f64>],
    labels: &[AnswerClass],
    classes: ClassSet,
    config: &NbcConfig,
) -> Result<NbcModel> {
    if features.len() != labels.len() {
        return Err(OmrError::LengthMismatch {
            left: features.len(),
            right: labels.len(),
        });
    }
    check_training_set(labels, classes, 2)?;
    let dim = features[0].len();
    let mut means = Vec::new();
    let mut variances = Vec::new();
    let mut counts = Vec::new();
    for c in classes.iter() {
        let rows: Vec<&Vec<f64>> = features
            .iter()
            .zip(labels)
            .filter(|(_, &l)| l == c)
            .map(|(f, _)| f)
            .collect();
        let n = rows.len() as f64;
        let mut mean = vec![0.0; dim];
        for r in &rows {
            if r.len() != dim {
                return Err(OmrError::DimensionMismatch {
                    expected: dim,
                    got: r.len(),
                });
            }
            for (m, v) in mean.iter_mut().zip(r.iter()) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; dim];
        for r in &rows {
            for ((s, v), m) in var.iter_mut().zip(r.iter()).zip(&mean) {
                *s += (v - m).powi(2);
            }
        }
        var.iter_mut().for_each(|s| *s = (*s / n).max(VARIANCE_FLOOR));
        means.push(mean);
        variances.push(var);
        counts.push(n);
    }
    let priors = priors(classes, &counts, config)?;
    Ok(NbcModel {
        classes,
        means,
        variances,
        priors,
    })
}

fn priors(classes: ClassSet, counts: &[f64], config: &NbcConfig) -> Result<Vec<f64>> {
    let total: f64 = counts.iter().sum();
    let empirical: Vec<f64> = counts.iter().map(|c| c / total).collect();
    if config.prior_override.is_empty() {
        return Ok(empirical);
    }
    let mut fixed = 0.0;
    for (&c, &p) in &config.prior_override {
        if !classes.contains(c) {
            return Err(OmrError::ConfigInvalid(format!(
                "prior override for {c}, which is not in {classes}"
            )));
        }
        if !(0.0..=1.0).contains(&p) {
            return Err(OmrError::ConfigInvalid(format!("prior {p} for {c} is not a probability")));
        }
        fixed += p;
    }
    let free: f64 = classes
        .iter()
        .zip(&empirical)
        .filter(|(c, _)| !config.prior_override.contains_key(c))
        .map(|(_, p)| p)
        .sum();
    if fixed > 1.0 + 1e-12 || (free == 0.0 && (fixed - 1.0).abs() > 1e-12) {
        return Err(OmrError::ConfigInvalid(
            "prior overrides must leave a simplex over the classes".into(),
        ));
    }
    Ok(classes
        .iter()
        .zip(&empirical)
        .map(|(c, &p)| match config.prior_override.get(&c) {
            Some(&fixed_p) => fixed_p,
            None => p / free * (1.0 - fixed),
        })
        .collect())
}

impl NbcModel {
    pub fn dim(&self) -> usize {
        self.means.first().map_or(0, Vec::len)
    }

    /// Unnormalized log posteriors; zero-prior classes get `-inf`.
    pub fn log_joint(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.dim() {
            return Err(OmrError::DimensionMismatch {
                expected: self.dim(),
                got: v.len(),
            });
        }
        Ok((0..self.priors.len())
            .map(|k| {
                if self.priors[k] <= 0.0 {
                    return f64::NEG_INFINITY;
                }
                let ll: f64 = v
                    .iter()
                    .zip(&self.means[k])
                    .zip(&self.variances[k])
                    .map(|((x, m), s2)| -0.5 * ((2.0 * std::f64::consts::PI * s2).ln() + (x - m).powi(2) / s2))
                    .sum();
                self.priors[k].ln() + ll
            })
            .collect())
    }
}

pub fn classify_nbc(model: &NbcModel, v: &[f64]) -> Result<ClassScores> {
    let lj = model.log_joint(v)?;
    let max = lj.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = lj.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exp.iter().sum();
    let probs: Vec<f64> = exp.iter().map(|e| e / z).collect();
    Ok(ClassScores::from_probabilities(model.classes, &probs))
}
