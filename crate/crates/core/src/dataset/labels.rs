use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::metadata::ExamMetadata;
use crate::classifiers::AnswerClass;
use crate::error::{OmrError, Result};
use crate::features::RoiImage;
use crate::grading::extract_rois;
use crate::raster::ColorImage;

/// Key of one answer box on one sheet image.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct BoxKey {
    pub image: String,
    pub question: usize,
    pub choice: usize,
}

/// Ground-truth `answerType` per answer box. Serialized as CSV with the
/// header `image,question,choice,answerType`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LabelTable {
    labels: BTreeMap<BoxKey, AnswerClass>,
}

#[derive(Debug, Serialize, Deserialize)]
struct LabelRow {
    image: String,
    question: usize,
    choice: usize,
    #[serde(rename = "answerType")]
    answer_type: u8,
}

impl LabelTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, image: &str, question: usize, choice: usize, class: AnswerClass) {
        self.labels.insert(
            BoxKey {
                image: image.to_string(),
                question,
                choice,
            },
            class,
        );
    }

    pub fn get(&self, image: &str, question: usize, choice: usize) -> Option<AnswerClass> {
        self.labels
            .get(&BoxKey {
                image: image.to_string(),
                question,
                choice,
            })
            .copied()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&BoxKey, AnswerClass)> {
        self.labels.iter().map(|(k, v)| (k, *v))
    }

    /// Labels of one sheet as `[question][choice]`.
    pub fn sheet(&self, image: &str, meta: &ExamMetadata) -> Result<Vec<Vec<AnswerClass>>> {
        meta.questions
            .iter()
            .map(|q| {
                (0..q.choices.len())
                    .map(|c| {
                        self.get(image, q.index, c).ok_or_else(|| {
                            OmrError::LabelMissing(format!("{image} question {} choice {c}", q.index))
                        })
                    })
                    .collect()
            })
            .collect()
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(Vec::new());
        for (k, v) in &self.labels {
            w.serialize(LabelRow {
                image: k.image.clone(),
                question: k.question,
                choice: k.choice,
                answer_type: v.code(),
            })
            .map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| OmrError::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let mut table = LabelTable::new();
        for (i, row) in r.deserialize::<LabelRow>().enumerate() {
            let row = row.map_err(|e| OmrError::ParseError {
                location: format!("labels row {}", i + 2),
                message: e.to_string(),
            })?;
            let class = AnswerClass::from_code(row.answer_type).map_err(|_| {
                OmrError::validation(
                    "answer-type",
                    format!("labels row {}: answerType {} is not 1, 2 or 3", i + 2, row.answer_type),
                )
            })?;
            table.insert(&row.image, row.question, row.choice, class);
        }
        Ok(table)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_csv(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_csv()?)?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> OmrError {
    OmrError::Io(std::io::Error::other(e.to_string()))
}

/// One labeled answer box. Augmented samples point back at their source.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub id: usize,
    pub roi: RoiImage,
    pub label: AnswerClass,
    pub exam_id: String,
    pub image: String,
    pub question: usize,
    pub choice: usize,
    pub augmented_from: Option<usize>,
}

impl LabeledSample {
    pub fn is_augmented(&self) -> bool {
        self.augmented_from.is_some()
    }
}

/// One sample per (sheet, box), cropped from registered sheets.
pub fn collect_labeled_samples(
    sheets: &[(String, ColorImage)],
    meta: &ExamMetadata,
    labels: &LabelTable,
) -> Result<Vec<LabeledSample>> {
    let mut out = Vec::with_capacity(sheets.len() * meta.box_count());
    for (name, image) in sheets {
        for q in &meta.questions {
            let rois = extract_rois(image, meta, q.index)?;
            for (c, roi) in rois.into_iter().enumerate() {
                let label = labels.get(name, q.index, c).ok_or_else(|| {
                    OmrError::LabelMissing(format!("{name} question {} choice {c}", q.index))
                })?;
                out.push(LabeledSample {
                    id: out.len(),
                    roi,
                    label,
                    exam_id: meta.exam_id.clone(),
                    image: name.clone(),
                    question: q.index,
                    choice: c,
                    augmented_from: None,
                });
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip() {
        let mut t = LabelTable::new();
        t.insert("exam0_1_1", 0, 2, AnswerClass::Confirmed);
        t.insert("exam0_1_1", 1, 0, AnswerClass::CrossedOut);
        let text = t.to_csv().unwrap();
        assert!(text.starts_with("image,question,choice,answerType\n"));
        assert_eq!(LabelTable::from_csv(&text).unwrap(), t);
    }

    #[test]
    fn unknown_code_rejected() {
        let err = LabelTable::from_csv("image,question,choice,answerType\na,0,0,4\n").unwrap_err();
        assert_eq!(err.name(), "ValidationError");
    }
}
