//! Sheet grading. Each question's boxes are classified in choice order and
//! folded with the grading rule:
//!
//! * a confirmed box always becomes the answer and is counted;
//! * a crossed-out box becomes the answer only while no confirmed box has
//!   been seen (so with several crossed-out boxes and no confirmed one, the
//!   last crossed-out box wins);
//! * two or more confirmed boxes score zero;
//! * otherwise the question's weight is awarded when the answer matches the key.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifiers::{AnswerClass, ClassScores};
use crate::dataset::{ExamMetadata, Question, Rect};
use crate::error::{OmrError, Result};
use crate::features::RoiImage;
use crate::raster::ColorImage;
use crate::registration::{register_sheet, ReferenceFeatures, RegistrationConfig, RegistrationReport};
use crate::strategy::Strategy;

pub const DEFAULT_REVIEW_THRESHOLD: f64 = 0.6;

/// Pixels a rectangle may overhang the image before extraction fails.
pub const CLIP_TOLERANCE_PX: u32 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RuleOutcome {
    /// Index chosen by the rule, `None` when every box is empty.
    pub answer: Option<usize>,
    pub confirmed: usize,
    pub crossed_out: usize,
}

pub fn apply_rule(classes: &[AnswerClass]) -> RuleOutcome {
    let mut answer = None;
    let mut confirmed = 0;
    let mut crossed_out = 0;
    for (i, &c) in classes.iter().enumerate() {
        let crossed = c == AnswerClass::CrossedOut;
        let is_confirmed = c == AnswerClass::Confirmed;
        if crossed {
            crossed_out += 1;
        }
        if (crossed && confirmed == 0) || is_confirmed {
            answer = Some(i);
            if is_confirmed {
                confirmed += 1;
            }
        }
    }
    RuleOutcome {
        answer,
        confirmed,
        crossed_out,
    }
}

/// Marks awarded for one question given its box classes.
pub fn score_question(classes: &[AnswerClass], correct_choice: usize, weight: f64) -> f64 {
    let r = apply_rule(classes);
    if r.confirmed <= 1 && r.answer == Some(correct_choice) {
        weight
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxVerdict {
    pub class: AnswerClass,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionResult {
    pub question_index: usize,
    pub boxes: Vec<BoxVerdict>,
    pub selected_choice: Option<usize>,
    pub confirmed_count: usize,
    pub awarded: f64,
    pub flagged_for_review: bool,
}

impl QuestionResult {
    pub fn min_confidence(&self) -> f64 {
        self.boxes
            .iter()
            .map(|b| b.confidence)
            .fold(f64::INFINITY, f64::min)
    }
}

/// Applies the grading rule to already-classified boxes. A question is
/// flagged when any box is below `review_threshold` or when several
/// crossed-out boxes compete without a confirmed one.
pub fn grade_question(question: &Question, boxes: Vec<BoxVerdict>, review_threshold: f64) -> QuestionResult {
    let classes: Vec<_> = boxes.iter().map(|b| b.class).collect();
    let rule = apply_rule(&classes);
    let awarded = score_question(&classes, question.correct_choice, question.weight);
    let low_confidence = boxes.iter().any(|b| b.confidence < review_threshold);
    let ambiguous_cancel = rule.confirmed == 0 && rule.crossed_out > 1;
    QuestionResult {
        question_index: question.index,
        selected_choice: if rule.confirmed >= 2 { None } else { rule.answer },
        confirmed_count: rule.confirmed,
        awarded,
        flagged_for_review: low_confidence || ambiguous_cancel,
        boxes,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SheetGrade {
    pub sheet_id: String,
    pub total: f64,
    pub questions: Vec<QuestionResult>,
    pub registration: Option<RegistrationReport>,
}

impl SheetGrade {
    pub fn flagged(&self) -> impl Iterator<Item = &QuestionResult> {
        self.questions.iter().filter(|q| q.flagged_for_review)
    }

    /// Replaces one box's class (confidence 1) and re-applies the grading rule.
    pub fn override_box(
        &mut self,
        meta: &ExamMetadata,
        question: usize,
        choice: usize,
        class: AnswerClass,
        review_threshold: f64,
    ) -> Result<()> {
        let q = meta.question(question)?;
        let pos = self
            .questions
            .iter()
            .position(|r| r.question_index == question)
            .ok_or(OmrError::QuestionUnknown(question))?;
        let mut boxes = self.questions[pos].boxes.clone();
        let b = boxes.get_mut(choice).ok_or_else(|| {
            OmrError::validation("choice-range", format!("question {question} has no choice {choice}"))
        })?;
        *b = BoxVerdict {
            class,
            confidence: 1.0,
        };
        self.questions[pos] = grade_question(q, boxes, review_threshold);
        self.total = self.questions.iter().map(|r| r.awarded).sum();
        Ok(())
    }
}

fn crop(image: &ColorImage, rect: &Rect, question: usize, choice: usize) -> Result<ColorImage> {
    let (w, h) = image.dimensions();
    if rect.x >= w || rect.y >= h {
        return Err(OmrError::RoiOutOfBounds { question, choice });
    }
    if rect.right() > w + CLIP_TOLERANCE_PX || rect.bottom() > h + CLIP_TOLERANCE_PX {
        return Err(OmrError::RoiOutOfBounds { question, choice });
    }
    let cw = rect.w.min(w - rect.x);
    let ch = rect.h.min(h - rect.y);
    Ok(image::imageops::crop_imm(image, rect.x, rect.y, cw, ch).to_image())
}

/// Crops an arbitrary rectangle of a registered sheet, with the same bounds
/// tolerance as the stored answer boxes.
pub fn crop_rect(registered: &ColorImage, rect: &Rect, question: usize, choice: usize) -> Result<RoiImage> {
    Ok(RoiImage::new(crop(registered, rect, question, choice)?))
}

/// Crops every choice box of one question from a registered sheet.
pub fn extract_rois(registered: &ColorImage, meta: &ExamMetadata, question: usize) -> Result<Vec<RoiImage>> {
    let q = meta.question(question)?;
    q.choices
        .iter()
        .map(|b| {
            crop(registered, &b.rect, q.index, b.choice_index).map(|p| RoiImage::with_box(p, *b))
        })
        .collect()
}

/// Grades the questions of `page` on a registered sheet image.
pub fn grade_sheet(
    sheet_id: &str,
    registered: &ColorImage,
    meta: &ExamMetadata,
    page: usize,
    strategy: &Strategy,
    review_threshold: f64,
) -> Result<SheetGrade> {
    let mut questions = Vec::new();
    for q in meta.questions_on_page(page) {
        let rois = extract_rois(registered, meta, q.index)?;
        let boxes = rois
            .iter()
            .map(|roi| {
                strategy.classify(roi).map(|s: ClassScores| BoxVerdict {
                    class: s.predicted,
                    confidence: s.confidence,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        questions.push(grade_question(q, boxes, review_threshold));
    }
    Ok(SheetGrade {
        sheet_id: sheet_id.to_string(),
        total: questions.iter().map(|r| r.awarded).sum(),
        questions,
        registration: None,
    })
}

/// Page index (0-based) encoded in an `examID_sheet_page` image name, where
/// the page number in the name is 1-based. Names without that suffix map to
/// page 0.
pub fn page_from_name(name: &str) -> usize {
    let stem = Path::new(name)
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or(name);
    let parts: Vec<_> = stem.rsplitn(3, '_').collect();
    if parts.len() == 3 {
        if let (Ok(page), Ok(_)) = (parts[0].parse::<usize>(), parts[1].parse::<usize>()) {
            return page.saturating_sub(1);
        }
    }
    0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileFailure {
    pub file: String,
    pub error: String,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub sheets: usize,
    pub graded: usize,
    pub failures: Vec<FileFailure>,
}

/// Everything needed to grade sheets of one exam. Shared read-only across
/// worker threads.
pub struct Grader {
    /// One reference per page.
    pub references: Vec<ReferenceFeatures>,
    pub metadata: ExamMetadata,
    pub strategy: Strategy,
    pub registration: RegistrationConfig,
    pub review_threshold: f64,
}

impl Grader {
    pub fn grade_image(&self, name: &str, sheet: &ColorImage) -> Result<SheetGrade> {
        let page = page_from_name(name);
        let reference = self.references.get(page).ok_or_else(|| {
            OmrError::ConfigInvalid(format!("no reference image for page {} of {name}", page + 1))
        })?;
        let reg = register_sheet(sheet, reference, &self.registration)?;
        let mut grade = grade_sheet(
            name,
            &reg.image,
            &self.metadata,
            page,
            &self.strategy,
            self.review_threshold,
        )?;
        grade.registration = Some(reg.report);
        Ok(grade)
    }

    pub fn grade_file(&self, path: &Path) -> Result<SheetGrade> {
        let image = image::open(path)?.to_rgb8();
        let name = path
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or_default()
            .to_string();
        self.grade_image(&name, &image)
    }

    /// Grades files independently; a failure is recorded and does not stop
    /// the batch. Output order follows input order for any `concurrency`.
    pub fn grade_batch(&self, files: &[PathBuf], concurrency: usize) -> (Vec<Result<SheetGrade>>, RunReport) {
        self.grade_batch_with_progress(files, concurrency, &|| {})
    }

    /// As [`Grader::grade_batch`], calling `on_done` after each file.
    pub fn grade_batch_with_progress(
        &self,
        files: &[PathBuf],
        concurrency: usize,
        on_done: &(dyn Fn() + Sync),
    ) -> (Vec<Result<SheetGrade>>, RunReport) {
        let grade = |f: &PathBuf| {
            let r = self.grade_file(f);
            on_done();
            r
        };
        let run = || -> Vec<Result<SheetGrade>> { files.par_iter().map(grade).collect() };
        let results = match rayon::ThreadPoolBuilder::new()
            .num_threads(concurrency.max(1))
            .build()
        {
            Ok(pool) => pool.install(run),
            Err(_) => files.iter().map(grade).collect(),
        };
        let mut report = RunReport {
            sheets: files.len(),
            ..Default::default()
        };
        for (f, r) in files.iter().zip(&results) {
            match r {
                Ok(_) => report.graded += 1,
                Err(e) => report.failures.push(FileFailure {
                    file: f.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string(),
                    error: e.name().to_string(),
                    message: e.to_string(),
                }),
            }
        }
        (results, report)
    }
}
