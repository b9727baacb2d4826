//! Straight-forward and two-stage composition of box classifiers.
//!
//! A two-stage strategy first separates filled from empty boxes; only boxes
//! the first stage calls filled reach the second, which tells confirmed
//! from crossed-out marks.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::classifiers::{AnswerClass, BoxClassifier, ClassScores, ClassSet};
use crate::error::{OmrError, Result};
use crate::features::RoiImage;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StrategyKind {
    #[serde(rename = "SF")]
    StraightForward,
    #[serde(rename = "2S")]
    TwoStage,
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StrategyKind::StraightForward => "SF",
            StrategyKind::TwoStage => "2S",
        })
    }
}

impl FromStr for StrategyKind {
    type Err = OmrError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "SF" | "STRAIGHT-FORWARD" => Ok(StrategyKind::StraightForward),
            "2S" | "TWO-STAGE" => Ok(StrategyKind::TwoStage),
            other => Err(OmrError::SpecInvalid(format!("unknown strategy `{other}`"))),
        }
    }
}

pub const STAGE1_CLASSES: ClassSet = ClassSet::CONFIRMED_EMPTY;
pub const STAGE2_CLASSES: ClassSet = ClassSet::CONFIRMED_CROSSED;

#[derive(Clone)]
pub struct Strategy {
    kind: StrategyKind,
    stage1: Arc<dyn BoxClassifier>,
    stage2: Option<Arc<dyn BoxClassifier>>,
}

impl fmt::Debug for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Strategy({})", self.describe())
    }
}

impl Strategy {
    /// `model` must be trained on all three classes.
    pub fn straight_forward(model: Arc<dyn BoxClassifier>) -> Result<Self> {
        if model.classes() != ClassSet::ALL {
            return Err(OmrError::SpecInvalid(format!(
                "a straight-forward model must cover all classes, {} covers {}",
                model.name(),
                model.classes()
            )));
        }
        Ok(Strategy {
            kind: StrategyKind::StraightForward,
            stage1: model,
            stage2: None,
        })
    }

    /// `stage1` must be trained on confirmed/empty, `stage2` on
    /// confirmed/crossed-out.
    pub fn two_stage(stage1: Arc<dyn BoxClassifier>, stage2: Arc<dyn BoxClassifier>) -> Result<Self> {
        for (stage, model, want) in [(1, &stage1, STAGE1_CLASSES), (2, &stage2, STAGE2_CLASSES)] {
            if model.classes() != want {
                return Err(OmrError::SpecInvalid(format!(
                    "stage {stage} must be trained on {want}, {} is trained on {}",
                    model.name(),
                    model.classes()
                )));
            }
        }
        Ok(Strategy {
            kind: StrategyKind::TwoStage,
            stage1,
            stage2: Some(stage2),
        })
    }

    pub fn kind(&self) -> StrategyKind {
        self.kind
    }

    pub fn stage1(&self) -> &Arc<dyn BoxClassifier> {
        &self.stage1
    }

    pub fn stage2(&self) -> Option<&Arc<dyn BoxClassifier>> {
        self.stage2.as_ref()
    }

    /// e.g. `cnn (SF)` or `bovw-cnn (2S)`.
    pub fn describe(&self) -> String {
        match &self.stage2 {
            None => format!("{} ({})", self.stage1.name(), self.kind),
            Some(s2) => format!("{}-{} ({})", self.stage1.name(), s2.name(), self.kind),
        }
    }

    pub fn classify(&self, roi: &RoiImage) -> Result<ClassScores> {
        let first = self.stage1.classify(roi)?;
        match &self.stage2 {
            None => Ok(first),
            Some(_) if first.predicted == AnswerClass::Empty => Ok(first),
            Some(stage2) => stage2.classify(roi),
        }
    }
}

pub fn classify_strategy(roi: &RoiImage, strategy: &Strategy) -> Result<ClassScores> {
    strategy.classify(roi)
}
