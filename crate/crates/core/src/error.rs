use thiserror::Error;

pub type Result<T, E = OmrError> = std::result::Result<T, E>;

/// Every failure the pipeline can report. Variant names double as the
/// machine-readable error names returned by the HTTP service.
#[derive(Debug, Error)]
pub enum OmrError {
    #[error("image has a zero dimension ({width}x{height})")]
    EmptyImage { width: u32, height: u32 },
    #[error("image too small: {width}x{height}, need at least {min} px per side")]
    ImageTooSmall { width: u32, height: u32, min: u32 },
    #[error("descriptor length mismatch: {left} vs {right}")]
    DescriptorMismatch { left: usize, right: usize },
    #[error("features from detector `{left}` cannot be matched against `{right}`")]
    DetectorMismatch { left: String, right: String },
    #[error("insufficient matches: {found} (need {needed})")]
    InsufficientMatches { found: usize, needed: usize },
    #[error("no consensus: best model has {best_inliers} inliers (need {needed})")]
    NoConsensus { best_inliers: usize, needed: usize },
    #[error("transform is singular (det = {det:e})")]
    SingularTransform { det: f64 },
    #[error("registration failed: {0}")]
    RegistrationFailed(Box<OmrError>),
    #[error("degenerate ROI: {width}x{height} (need at least 4x4)")]
    DegenerateRoi { width: u32, height: u32 },
    #[error("configuration mismatch: {0}")]
    ConfigMismatch(String),
    #[error("degenerate training set: {0}")]
    DegenerateTrainingSet(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("insufficient descriptors: {available} distinct, need {needed}")]
    InsufficientDescriptors { available: usize, needed: usize },
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
    #[error("training diverged at epoch {epoch} (loss is not finite)")]
    Divergence { epoch: usize },
    #[error("model trained on {model} cannot serve class set {requested}")]
    ModelClassMismatch { model: String, requested: String },
    #[error("invalid strategy: {0}")]
    SpecInvalid(String),
    #[error("unknown question {0}")]
    QuestionUnknown(usize),
    #[error("ROI of question {question} choice {choice} lies outside the image")]
    RoiOutOfBounds { question: usize, choice: usize },
    #[error("parse error at {location}: {message}")]
    ParseError { location: String, message: String },
    #[error("validation error ({invariant}): {message}")]
    ValidationError { invariant: String, message: String },
    #[error("missing label for {0}")]
    LabelMissing(String),
    #[error("too few samples: class {class} has {count}, need at least {needed}")]
    TooFewSamples { class: String, count: usize, needed: usize },
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("model file: {0}")]
    ModelFormat(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl OmrError {
    pub fn name(&self) -> &'static str {
        match self {
            OmrError::EmptyImage { .. } => "EmptyImage",
            OmrError::ImageTooSmall { .. } => "ImageTooSmall",
            OmrError::DescriptorMismatch { .. } => "DescriptorMismatch",
            OmrError::DetectorMismatch { .. } => "DetectorMismatch",
            OmrError::InsufficientMatches { .. } => "InsufficientMatches",
            OmrError::NoConsensus { .. } => "NoConsensus",
            OmrError::SingularTransform { .. } => "SingularTransform",
            OmrError::RegistrationFailed(_) => "RegistrationFailed",
            OmrError::DegenerateRoi { .. } => "DegenerateRoi",
            OmrError::ConfigMismatch(_) => "ConfigMismatch",
            OmrError::DegenerateTrainingSet(_) => "DegenerateTrainingSet",
            OmrError::DimensionMismatch { .. } => "DimensionMismatch",
            OmrError::InsufficientDescriptors { .. } => "InsufficientDescriptors",
            OmrError::ConfigInvalid(_) => "ConfigInvalid",
            OmrError::Divergence { .. } => "Divergence",
            OmrError::ModelClassMismatch { .. } => "ModelClassMismatch",
            OmrError::SpecInvalid(_) => "SpecInvalid",
            OmrError::QuestionUnknown(_) => "QuestionUnknown",
            OmrError::RoiOutOfBounds { .. } => "RoiOutOfBounds",
            OmrError::ParseError { .. } => "ParseError",
            OmrError::ValidationError { .. } => "ValidationError",
            OmrError::LabelMissing(_) => "LabelMissing",
            OmrError::TooFewSamples { .. } => "TooFewSamples",
            OmrError::LengthMismatch { .. } => "LengthMismatch",
            OmrError::ModelFormat(_) => "ModelFormat",
            OmrError::Io(_) => "Io",
            OmrError::Image(_) => "Image",
        }
    }

    pub(crate) fn validation(invariant: &str, message: impl Into<String>) -> Self {
        OmrError::ValidationError {
            invariant: invariant.to_string(),
            message: message.into(),
        }
    }
}
