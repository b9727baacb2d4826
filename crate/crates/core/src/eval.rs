//! Cross-validation of box classifiers and the two grading-accuracy
//! measures (per question and per whole sheet).

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifiers::{AnswerClass, BoxClassifier, ClassSet, Trainer};
use crate::dataset::LabeledSample;
use crate::error::{OmrError, Result};
use crate::grading::SheetGrade;

/// Indices into the sample list of one cross-validation round.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    /// Originals of other folds plus their augmented variants.
    pub train: Vec<usize>,
    /// Originals of this fold only.
    pub test: Vec<usize>,
}

/// Splits originals into `k` folds stratified by class and exam. Augmented
/// samples follow their source: they train only in rounds where the source
/// is not under test, and are never tested.
pub fn kfold_split(samples: &[LabeledSample], k: usize, seed: u64) -> Result<Vec<Fold>> {
    if k < 2 {
        return Err(OmrError::ConfigInvalid("k-fold needs k ≥ 2".into()));
    }
    let mut groups: BTreeMap<(AnswerClass, &str), Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        if !s.is_augmented() {
            groups.entry((s.label, s.exam_id.as_str())).or_default().push(i);
        }
    }
    for c in AnswerClass::ALL {
        let count: usize = groups.iter().filter(|((l, _), _)| *l == c).map(|(_, v)| v.len()).sum();
        if count > 0 && count < k {
            return Err(OmrError::TooFewSamples {
                class: c.name().into(),
                count,
                needed: k,
            });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fold_of = vec![usize::MAX; samples.len()];
    let mut next = HashMap::new();
    for ((class, _), members) in &mut groups {
        members.shuffle(&mut rng);
        let counter = next.entry(*class).or_insert(0usize);
        for &i in members.iter() {
            fold_of[i] = *counter % k;
            *counter += 1;
        }
    }
    let id_to_index: HashMap<usize, usize> = samples.iter().enumerate().map(|(i, s)| (s.id, i)).collect();
    for (i, s) in samples.iter().enumerate() {
        if let Some(src) = s.augmented_from {
            let j = *id_to_index.get(&src).ok_or_else(|| {
                OmrError::validation("augmented-source", format!("sample {} derives from unknown id {src}", s.id))
            })?;
            fold_of[i] = fold_of[j];
        }
    }
    Ok((0..k)
        .map(|f| Fold {
            train: (0..samples.len()).filter(|&i| fold_of[i] != f).collect(),
            test: (0..samples.len())
                .filter(|&i| fold_of[i] == f && !samples[i].is_augmented())
                .collect(),
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: ClassSet,
    /// `counts[true][predicted]`, in class-set order.
    pub counts: Vec<Vec<usize>>,
}

impl ConfusionMatrix {
    pub fn new(classes: ClassSet) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![vec![0; classes.len()]; classes.len()],
        }
    }

    pub fn add(&mut self, truth: AnswerClass, predicted: AnswerClass) -> Result<()> {
        let (Some(t), Some(p)) = (self.classes.position(truth), self.classes.position(predicted)) else {
            return Err(OmrError::validation(
                "class-subset",
                format!("{truth} → {predicted} is outside {}", self.classes),
            ));
        };
        self.counts[t][p] += 1;
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    pub fn correct(&self) -> usize {
        (0..self.counts.len()).map(|i| self.counts[i][i]).sum()
    }

    pub fn accuracy(&self) -> f64 {
        ratio(self.correct(), self.total())
    }

    /// Mean recall over the classes that occur in the truth.
    pub fn balanced_accuracy(&self) -> f64 {
        let recalls: Vec<f64> = self
            .counts
            .iter()
            .enumerate()
            .filter_map(|(i, row)| {
                let support: usize = row.iter().sum();
                (support > 0).then(|| row[i] as f64 / support as f64)
            })
            .collect();
        if recalls.is_empty() {
            0.0
        } else {
            recalls.iter().sum::<f64>() / recalls.len() as f64
        }
    }

    pub fn metrics(&self) -> Vec<ClassMetrics> {
        self.classes
            .iter()
            .enumerate()
            .map(|(i, class)| {
                let tp = self.counts[i][i];
                let support: usize = self.counts[i].iter().sum();
                let predicted: usize = self.counts.iter().map(|row| row[i]).sum();
                let precision = ratio(tp, predicted);
                let recall = ratio(tp, support);
                let f1 = if precision + recall == 0.0 {
                    0.0
                } else {
                    2.0 * precision * recall / (precision + recall)
                };
                ClassMetrics {
                    class,
                    precision,
                    recall,
                    f1,
                    support,
                }
            })
            .collect()
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: AnswerClass,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub classifier: String,
    pub strategy: String,
    /// Table letter (a)–(d) of the class subset, when it is one of those.
    pub subset: Option<char>,
    pub classes: ClassSet,
    pub k: usize,
    pub seed: u64,
    pub fold_accuracy: Vec<f64>,
    pub mean_accuracy: f64,
    /// Mean per-class recall of the pooled confusion matrix.
    pub balanced_accuracy: f64,
    pub confusion: ConfusionMatrix,
    pub per_class: Vec<ClassMetrics>,
}

impl EvalReport {
    pub fn best_fold(&self) -> usize {
        let mut best = 0;
        for (i, &a) in self.fold_accuracy.iter().enumerate() {
            if a > self.fold_accuracy[best] {
                best = i;
            }
        }
        best
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self).map_err(|e| OmrError::ModelFormat(e.to_string()))?;
        s.push('\n');
        Ok(s)
    }

    /// Folds, mean, and per-class precision/recall/F as plain text.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let subset = self.subset.map(|c| format!("({c}) ")).unwrap_or_default();
        let _ = writeln!(s, "{} [{}] {}{}", self.classifier, self.strategy, subset, self.classes);
        for (i, a) in self.fold_accuracy.iter().enumerate() {
            let _ = writeln!(s, "  fold {}: {:.4}", i + 1, a);
        }
        let _ = writeln!(s, "  mean:   {:.4}", self.mean_accuracy);
        let _ = writeln!(s, "  balanced: {:.4}", self.balanced_accuracy);
        let _ = writeln!(s, "  {:<12} {:>9} {:>9} {:>9} {:>7}", "class", "precision", "recall", "F", "n");
        for m in &self.per_class {
            let _ = writeln!(
                s,
                "  {:<12} {:>9.4} {:>9.4} {:>9.4} {:>7}",
                m.class.name(),
                m.precision,
                m.recall,
                m.f1,
                m.support
            );
        }
        s
    }
}

/// Mean accuracy per classifier (rows) and class subset (columns).
pub fn render_table(reports: &[EvalReport]) -> String {
    let mut rows: Vec<String> = Vec::new();
    for r in reports {
        let name = format!("{} ({})", r.classifier, r.strategy);
        if !rows.contains(&name) {
            rows.push(name);
        }
    }
    let mut s = format!("{:<24}", "classifier");
    for (letter, _) in ClassSet::SUBSETS {
        let _ = write!(s, " {:>7}", format!("({letter})"));
    }
    s.push('\n');
    for row in rows {
        let _ = write!(s, "{row:<24}");
        for (_, set) in ClassSet::SUBSETS {
            match reports
                .iter()
                .find(|r| format!("{} ({})", r.classifier, r.strategy) == row && r.classes == set)
            {
                Some(r) => {
                    let _ = write!(s, " {:>7.3}", r.mean_accuracy);
                }
                None => {
                    let _ = write!(s, " {:>7}", "-");
                }
            }
        }
        s.push('\n');
    }
    s
}

pub struct CrossValidation {
    pub report: EvalReport,
    /// The model trained in each round, in fold order.
    pub models: Vec<Arc<dyn BoxClassifier>>,
}

/// Trains one model per fold on the samples of `classes` and tests it on
/// the held-out originals.
pub fn cross_validate(
    samples: &[LabeledSample],
    trainer: &dyn Trainer,
    classes: ClassSet,
    k: usize,
    seed: u64,
) -> Result<CrossValidation> {
    let in_scope: Vec<LabeledSample> = samples.iter().filter(|s| classes.contains(s.label)).cloned().collect();
    let folds = kfold_split(&in_scope, k, seed)?;
    let rounds = folds
        .par_iter()
        .enumerate()
        .map(|(f, fold)| -> Result<(Arc<dyn BoxClassifier>, ConfusionMatrix)> {
            let train: Vec<&LabeledSample> = fold.train.iter().map(|&i| &in_scope[i]).collect();
            let model = trainer.train(&train, classes, seed.wrapping_add(f as u64))?;
            let mut cm = ConfusionMatrix::new(classes);
            for &i in &fold.test {
                let s = &in_scope[i];
                cm.add(s.label, model.classify(&s.roi)?.predicted)?;
            }
            Ok((model, cm))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut confusion = ConfusionMatrix::new(classes);
    let mut fold_accuracy = Vec::with_capacity(k);
    let mut models = Vec::with_capacity(k);
    for (model, cm) in rounds {
        fold_accuracy.push(cm.accuracy());
        confusion.merge(&cm);
        models.push(model);
    }
    let mean_accuracy = fold_accuracy.iter().sum::<f64>() / k as f64;
    Ok(CrossValidation {
        report: EvalReport {
            classifier: trainer.name(),
            strategy: "SF".into(),
            subset: classes.letter(),
            classes,
            k,
            seed,
            fold_accuracy,
            mean_accuracy,
            balanced_accuracy: confusion.balanced_accuracy(),
            per_class: confusion.metrics(),
            confusion,
        },
        models,
    })
}

pub fn evaluate_classifier(
    samples: &[LabeledSample],
    trainer: &dyn Trainer,
    classes: ClassSet,
    k: usize,
    seed: u64,
) -> Result<EvalReport> {
    Ok(cross_validate(samples, trainer, classes, k, seed)?.report)
}

/// Ground-truth marks of one sheet, per question.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradeTruth {
    pub sheet_id: String,
    pub awarded: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradingAccuracy {
    pub question_based: f64,
    pub sheet_based: f64,
}

/// Fraction of questions whose awarded mark matches the truth, and fraction
/// of sheets on which every question does.
pub fn grading_accuracy(graded: &[SheetGrade], truth: &[GradeTruth]) -> Result<GradingAccuracy> {
    if graded.len() != truth.len() {
        return Err(OmrError::LengthMismatch {
            left: graded.len(),
            right: truth.len(),
        });
    }
    let (mut q_ok, mut q_total, mut s_ok) = (0usize, 0usize, 0usize);
    for (g, t) in graded.iter().zip(truth) {
        if g.questions.len() != t.awarded.len() {
            return Err(OmrError::LengthMismatch {
                left: g.questions.len(),
                right: t.awarded.len(),
            });
        }
        let ok = g
            .questions
            .iter()
            .zip(&t.awarded)
            .filter(|(q, &a)| (q.awarded - a).abs() < 1e-9)
            .count();
        q_ok += ok;
        q_total += t.awarded.len();
        if ok == t.awarded.len() {
            s_ok += 1;
        }
    }
    Ok(GradingAccuracy {
        question_based: ratio(q_ok, q_total),
        sheet_based: ratio(s_ok, graded.len()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::RoiImage;
    use crate::grading::{BoxVerdict, QuestionResult};
    use crate::raster::ColorImage;

    fn sample(id: usize, label: AnswerClass, exam: &str) -> LabeledSample {
        LabeledSample {
            id,
            roi: RoiImage::new(ColorImage::new(4, 4)),
            label,
            exam_id: exam.into(),
            image: format!("{exam}_1_1"),
            question: 0,
            choice: 0,
            augmented_from: None,
        }
    }

    #[test]
    fn folds_are_balanced() {
        let samples: Vec<_> = (0..100)
            .map(|i| sample(i, if i < 30 { AnswerClass::Confirmed } else { AnswerClass::Empty }, "e"))
            .collect();
        let folds = kfold_split(&samples, 5, 1).unwrap();
        for f in &folds {
            assert_eq!(f.test.len(), 20);
            let confirmed = f.test.iter().filter(|&&i| samples[i].label == AnswerClass::Confirmed).count();
            assert!((5..=7).contains(&confirmed));
        }
        assert_eq!(folds, kfold_split(&samples, 5, 1).unwrap());
    }

    #[test]
    fn too_few_of_a_class() {
        let samples: Vec<_> = (0..10)
            .map(|i| sample(i, if i < 3 { AnswerClass::CrossedOut } else { AnswerClass::Empty }, "e"))
            .collect();
        assert_eq!(kfold_split(&samples, 5, 0).unwrap_err().name(), "TooFewSamples");
    }

    #[test]
    fn f_is_zero_without_predictions() {
        let mut cm = ConfusionMatrix::new(ClassSet::CONFIRMED_EMPTY);
        for _ in 0..8 {
            cm.add(AnswerClass::Empty, AnswerClass::Empty).unwrap();
        }
        for _ in 0..2 {
            cm.add(AnswerClass::Confirmed, AnswerClass::Empty).unwrap();
        }
        let m = cm.metrics();
        assert_eq!(cm.accuracy(), 0.8);
        assert_eq!((m[0].precision, m[0].recall, m[0].f1), (0.0, 0.0, 0.0));
    }

    fn grade(awarded: &[f64]) -> SheetGrade {
        SheetGrade {
            sheet_id: "s".into(),
            total: awarded.iter().sum(),
            questions: awarded
                .iter()
                .enumerate()
                .map(|(i, &a)| QuestionResult {
                    question_index: i,
                    boxes: vec![BoxVerdict {
                        class: AnswerClass::Empty,
                        confidence: 1.0,
                    }],
                    selected_choice: None,
                    confirmed_count: 0,
                    awarded: a,
                    flagged_for_review: false,
                })
                .collect(),
            registration: None,
        }
    }

    #[test]
    fn one_wrong_question_in_ten_sheets() {
        let truth: Vec<_> = (0..10)
            .map(|i| GradeTruth {
                sheet_id: i.to_string(),
                awarded: vec![1.0; 10],
            })
            .collect();
        let mut graded: Vec<_> = (0..10).map(|_| grade(&[1.0; 10])).collect();
        graded[3].questions[7].awarded = 0.0;
        let acc = grading_accuracy(&graded, &truth).unwrap();
        assert!((acc.question_based - 0.99).abs() < 1e-12);
        assert!((acc.sheet_based - 0.9).abs() < 1e-12);
        assert!(grading_accuracy(&graded[..2], &truth).is_err());
    }
}
