//! Exam metadata, label files, crossed-out augmentation and the synthetic
//! exam generator.

mod augment;
mod labels;
mod metadata;
mod synth;

pub use augment::{augment_crossed_out, augment_samples, AugmentationConfig, Flip};
pub use labels::{collect_labeled_samples, BoxKey, LabelTable, LabeledSample};
pub use metadata::{load_metadata, save_metadata, ExamMetadata, Question, Rect, RoiBox};
pub use synth::{
    generate_synthetic_exam, LabelMode, MarkStyle, Perturbation, SynthConfig, SyntheticExam,
    SyntheticSheet,
};
