//! Exam metadata files. One JSON document per exam whose keys follow the
//! established variable names (`examId`, `questionRect`, …). Loading validates
//! every invariant; saving emits a canonical pretty-printed form so that
//! `save(load(file))` reproduces a canonical file byte for byte.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{OmrError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Rect {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl Rect {
    pub fn new(x: u32, y: u32, w: u32, h: u32) -> Self {
        Rect { x, y, w, h }
    }

    pub fn right(&self) -> u32 {
        self.x + self.w
    }

    pub fn bottom(&self) -> u32 {
        self.y + self.h
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RoiBox {
    pub rect: Rect,
    pub question_index: usize,
    pub choice_index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Question {
    pub index: usize,
    pub page: usize,
    pub weight: f64,
    pub correct_choice: usize,
    pub choices: Vec<RoiBox>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExamMetadata {
    pub exam_id: String,
    pub pages: usize,
    pub questions: Vec<Question>,
    pub has_student_id: bool,
    pub student_id_rect: Option<Rect>,
    /// Size of the model-answer image the rectangles refer to.
    pub reference_size: Option<(u32, u32)>,
    pub reference_image: Option<String>,
}

impl ExamMetadata {
    pub fn total_weight(&self) -> f64 {
        self.questions.iter().map(|q| q.weight).sum()
    }

    pub fn question(&self, index: usize) -> Result<&Question> {
        self.questions
            .get(index)
            .ok_or(OmrError::QuestionUnknown(index))
    }

    pub fn questions_on_page(&self, page: usize) -> impl Iterator<Item = &Question> {
        self.questions.iter().filter(move |q| q.page == page)
    }

    pub fn box_count(&self) -> usize {
        self.questions.iter().map(|q| q.choices.len()).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.exam_id.trim().is_empty() {
            return Err(OmrError::validation("exam-id", "examId is empty"));
        }
        if self.pages == 0 {
            return Err(OmrError::validation("page-count", "examNumberOfPages must be ≥ 1"));
        }
        if self.has_student_id != self.student_id_rect.is_some() {
            return Err(OmrError::validation(
                "student-id",
                "isThereAStudentId must agree with the presence of studentIdRect",
            ));
        }
        if self.questions.is_empty() {
            return Err(OmrError::validation("question-count", "exam has no questions"));
        }
        for (pos, q) in self.questions.iter().enumerate() {
            let name = |msg: String| format!("question {}: {msg}", q.index);
            if q.index != pos {
                return Err(OmrError::validation(
                    "question-order",
                    name(format!("listed at position {pos}")),
                ));
            }
            if q.choices.len() < 2 {
                return Err(OmrError::validation(
                    "choice-count",
                    name(format!("{} choices, need at least 2", q.choices.len())),
                ));
            }
            if q.correct_choice >= q.choices.len() {
                return Err(OmrError::validation(
                    "correct-choice-range",
                    name(format!(
                        "correct choice {} out of range ({} choices)",
                        q.correct_choice,
                        q.choices.len()
                    )),
                ));
            }
            if !(q.weight.is_finite() && q.weight > 0.0) {
                return Err(OmrError::validation(
                    "question-weight",
                    name(format!("weight {} must be positive", q.weight)),
                ));
            }
            if q.page >= self.pages {
                return Err(OmrError::validation(
                    "page-range",
                    name(format!("page {} ≥ page count {}", q.page, self.pages)),
                ));
            }
            for (c, b) in q.choices.iter().enumerate() {
                if b.question_index != q.index || b.choice_index != c {
                    return Err(OmrError::validation(
                        "box-index",
                        name(format!("box {c} carries indices ({}, {})", b.question_index, b.choice_index)),
                    ));
                }
                if b.rect.w == 0 || b.rect.h == 0 {
                    return Err(OmrError::validation(
                        "rect-size",
                        name(format!("choice {c} has an empty rectangle")),
                    ));
                }
                if let Some((w, h)) = self.reference_size {
                    if b.rect.right() > w || b.rect.bottom() > h {
                        return Err(OmrError::validation(
                            "rect-bounds",
                            name(format!("choice {c} rectangle exceeds the {w}x{h} reference")),
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: MetadataFile = serde_json::from_str(text).map_err(|e| OmrError::ParseError {
            location: format!("line {} column {}", e.line(), e.column()),
            message: e.to_string(),
        })?;
        let meta = file.into_metadata()?;
        meta.validate()?;
        Ok(meta)
    }

    pub fn to_json(&self) -> Result<String> {
        self.validate()?;
        let mut s = serde_json::to_string_pretty(&MetadataFile::from(self))
            .map_err(|e| OmrError::ModelFormat(e.to_string()))?;
        s.push('\n');
        Ok(s)
    }
}

pub fn load_metadata(path: impl AsRef<Path>) -> Result<ExamMetadata> {
    ExamMetadata::from_json(&std::fs::read_to_string(path)?)
}

pub fn save_metadata(meta: &ExamMetadata, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, meta.to_json()?)?;
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
struct MetadataFile {
    exam_id: String,
    exam_number_of_pages: usize,
    total_number_of_questions: usize,
    number_of_questions_per_page: Vec<usize>,
    is_there_a_student_id: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    student_id_rect: Option<[u32; 4]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    image_name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    image_size: Option<[u32; 2]>,
    questions: Vec<QuestionFile>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
struct QuestionFile {
    index: usize,
    page_number: usize,
    question_weight: f64,
    question_answer: usize,
    question_choices: usize,
    question_rect: Vec<[u32; 4]>,
}

impl From<&ExamMetadata> for MetadataFile {
    fn from(m: &ExamMetadata) -> Self {
        let mut per_page = vec![0; m.pages];
        for q in &m.questions {
            per_page[q.page] += 1;
        }
        MetadataFile {
            exam_id: m.exam_id.clone(),
            exam_number_of_pages: m.pages,
            total_number_of_questions: m.questions.len(),
            number_of_questions_per_page: per_page,
            is_there_a_student_id: m.has_student_id,
            student_id_rect: m.student_id_rect.map(|r| [r.x, r.y, r.w, r.h]),
            image_name: m.reference_image.clone(),
            image_size: m.reference_size.map(|(w, h)| [w, h]),
            questions: m
                .questions
                .iter()
                .map(|q| QuestionFile {
                    index: q.index,
                    page_number: q.page,
                    question_weight: q.weight,
                    question_answer: q.correct_choice,
                    question_choices: q.choices.len(),
                    question_rect: q
                        .choices
                        .iter()
                        .map(|b| [b.rect.x, b.rect.y, b.rect.w, b.rect.h])
                        .collect(),
                })
                .collect(),
        }
    }
}

impl MetadataFile {
    fn into_metadata(self) -> Result<ExamMetadata> {
        if self.total_number_of_questions != self.questions.len() {
            return Err(OmrError::validation(
                "question-count",
                format!(
                    "totalNumberOfQuestions is {} but {} questions are listed",
                    self.total_number_of_questions,
                    self.questions.len()
                ),
            ));
        }
        if self.number_of_questions_per_page.len() != self.exam_number_of_pages {
            return Err(OmrError::validation(
                "questions-per-page",
                "numberOfQuestionsPerPage needs one entry per page",
            ));
        }
        let mut counted = vec![0usize; self.exam_number_of_pages];
        for q in &self.questions {
            if let Some(c) = counted.get_mut(q.page_number) {
                *c += 1;
            }
        }
        if counted != self.number_of_questions_per_page {
            return Err(OmrError::validation(
                "questions-per-page",
                format!(
                    "numberOfQuestionsPerPage {:?} disagrees with listed questions {:?}",
                    self.number_of_questions_per_page, counted
                ),
            ));
        }
        let mut questions = Vec::with_capacity(self.questions.len());
        for q in self.questions {
            if q.question_choices != q.question_rect.len() {
                return Err(OmrError::validation(
                    "choice-count",
                    format!(
                        "question {}: questionChoices is {} but {} rectangles are listed",
                        q.index,
                        q.question_choices,
                        q.question_rect.len()
                    ),
                ));
            }
            questions.push(Question {
                index: q.index,
                page: q.page_number,
                weight: q.question_weight,
                correct_choice: q.question_answer,
                choices: q
                    .question_rect
                    .iter()
                    .enumerate()
                    .map(|(c, r)| RoiBox {
                        rect: Rect::new(r[0], r[1], r[2], r[3]),
                        question_index: q.index,
                        choice_index: c,
                    })
                    .collect(),
            });
        }
        Ok(ExamMetadata {
            exam_id: self.exam_id,
            pages: self.exam_number_of_pages,
            questions,
            has_student_id: self.is_there_a_student_id,
            student_id_rect: self.student_id_rect.map(|r| Rect::new(r[0], r[1], r[2], r[3])),
            reference_size: self.image_size.map(|s| (s[0], s[1])),
            reference_image: self.image_name,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
  "examId": "exam0",
  "examNumberOfPages": 1,
  "totalNumberOfQuestions": 1,
  "numberOfQuestionsPerPage": [
    1
  ],
  "isThereAStudentId": false,
  "questions": [
    {
      "index": 0,
      "pageNumber": 0,
      "questionWeight": 2.5,
      "questionAnswer": 1,
      "questionChoices": 2,
      "questionRect": [
        [
          10,
          20,
          28,
          28
        ],
        [
          70,
          20,
          28,
          28
        ]
      ]
    }
  ]
}
"#;

    #[test]
    fn minimal_file_loads() {
        let m = ExamMetadata::from_json(MINIMAL).unwrap();
        assert_eq!(m.questions.len(), 1);
        assert_eq!(m.questions[0].choices.len(), 2);
        assert_eq!(m.total_weight(), 2.5);
    }

    #[test]
    fn canonical_round_trip_is_byte_identical() {
        let m = ExamMetadata::from_json(MINIMAL).unwrap();
        assert_eq!(m.to_json().unwrap(), MINIMAL);
    }

    #[test]
    fn correct_choice_out_of_range_names_question() {
        let bad = MINIMAL.replace("\"questionAnswer\": 1", "\"questionAnswer\": 2");
        match ExamMetadata::from_json(&bad) {
            Err(OmrError::ValidationError { invariant, message }) => {
                assert_eq!(invariant, "correct-choice-range");
                assert!(message.contains("question 0"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn syntax_error_reports_location() {
        let err = ExamMetadata::from_json("{\n  \"examId\": ,\n}").unwrap_err();
        match err {
            OmrError::ParseError { location, .. } => assert!(location.starts_with("line 2")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn single_choice_rejected() {
        let bad = MINIMAL
            .replace("\"questionChoices\": 2", "\"questionChoices\": 1")
            .replace("\"questionAnswer\": 1", "\"questionAnswer\": 0")
            .replace(
                "        [\n          70,\n          20,\n          28,\n          28\n        ]\n",
                "",
            )
            .replace("        ],\n      ]", "        ]\n      ]");
        let err = ExamMetadata::from_json(&bad).unwrap_err();
        assert_eq!(err.name(), "ValidationError");
    }
}
