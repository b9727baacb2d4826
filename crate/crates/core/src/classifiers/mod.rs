//! Answer-box classifiers behind one contract: every model reports the
//! class subset it was trained on and maps an ROI to [`ClassScores`].

mod baseline;
mod bovw;
mod classes;
mod cnn;
mod kmeans;
mod nbc;
mod svm;
mod threshold;

use std::fmt;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use baseline::{train_baseline_svm, BaselineModel};
pub use bovw::{train_bovw, train_bovw_bags, BovwConfig, BovwModel};
pub use classes::{AnswerClass, ClassScores, ClassSet};
pub use cnn::{roi_tensor, train_cnn, train_cnn_tensors, CnnConfig, CnnModel, LayerSpec, Network, Params, Shape, Trace};
pub use kmeans::{build_vocabulary, encode_bovw, kmeans, Clustering, KmeansConfig, Vocabulary};
pub use nbc::{classify_nbc, train_nbc, NbcConfig, NbcModel, VARIANCE_FLOOR};
pub use svm::{LinearSvm, SvmConfig};
pub use threshold::{black_fraction, classify_threshold_otsu, otsu_threshold, ThresholdClassifier};

use crate::dataset::LabeledSample;
use crate::error::{OmrError, Result};
use crate::features::{handcrafted_vector, RoiImage};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Threshold,
    Baseline,
    Nbc,
    Bovw,
    Cnn,
}

impl ModelKind {
    pub const LEARNED: [ModelKind; 3] = [ModelKind::Nbc, ModelKind::Bovw, ModelKind::Cnn];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Threshold => "threshold",
            ModelKind::Baseline => "baseline",
            ModelKind::Nbc => "nbc",
            ModelKind::Bovw => "bovw",
            ModelKind::Cnn => "cnn",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = OmrError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "threshold" | "otsu" => Ok(ModelKind::Threshold),
            "baseline" => Ok(ModelKind::Baseline),
            "nbc" => Ok(ModelKind::Nbc),
            "bovw" => Ok(ModelKind::Bovw),
            "cnn" => Ok(ModelKind::Cnn),
            other => Err(OmrError::ConfigInvalid(format!("unknown classifier `{other}`"))),
        }
    }
}

/// Anything that classifies answer boxes. Implementations are immutable
/// and shared across threads.
pub trait BoxClassifier: Send + Sync {
    fn name(&self) -> String;
    fn classes(&self) -> ClassSet;
    fn classify(&self, roi: &RoiImage) -> Result<ClassScores>;
}

/// Produces a classifier from labeled samples.
pub trait Trainer: Send + Sync {
    fn name(&self) -> String;
    fn train(&self, samples: &[&LabeledSample], classes: ClassSet, seed: u64) -> Result<Arc<dyn BoxClassifier>>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "model", rename_all = "lowercase")]
pub enum TrainedModel {
    Threshold(ThresholdClassifier),
    Baseline(BaselineModel),
    Nbc(NbcModel),
    Bovw(BovwModel),
    Cnn(CnnModel),
}

impl TrainedModel {
    pub fn kind(&self) -> ModelKind {
        match self {
            TrainedModel::Threshold(_) => ModelKind::Threshold,
            TrainedModel::Baseline(_) => ModelKind::Baseline,
            TrainedModel::Nbc(_) => ModelKind::Nbc,
            TrainedModel::Bovw(_) => ModelKind::Bovw,
            TrainedModel::Cnn(_) => ModelKind::Cnn,
        }
    }

    pub fn classes(&self) -> ClassSet {
        match self {
            TrainedModel::Threshold(m) => m.classes(),
            TrainedModel::Baseline(m) => m.classes(),
            TrainedModel::Nbc(m) => m.classes,
            TrainedModel::Bovw(m) => m.classes(),
            TrainedModel::Cnn(m) => m.classes,
        }
    }

    /// Runs the model's own feature pipeline on `roi`.
    pub fn classify(&self, roi: &RoiImage) -> Result<ClassScores> {
        match self {
            TrainedModel::Threshold(m) => {
                roi.check()?;
                Ok(m.classify(roi))
            }
            TrainedModel::Baseline(m) => {
                roi.check()?;
                m.classify(roi)
            }
            TrainedModel::Nbc(m) => classify_nbc(m, handcrafted_vector(roi)?.as_slice()),
            TrainedModel::Bovw(m) => m.classify(roi),
            TrainedModel::Cnn(m) => m.classify(roi),
        }
    }

    /// Like [`classify`](Self::classify), but refuses when `requested`
    /// includes classes the model was not trained on.
    pub fn classify_for(&self, roi: &RoiImage, requested: ClassSet) -> Result<ClassScores> {
        if requested.iter().any(|c| !self.classes().contains(c)) {
            return Err(OmrError::ModelClassMismatch {
                model: self.classes().to_string(),
                requested: requested.to_string(),
            });
        }
        self.classify(roi)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(std::fs::File::open(path)?)
    }

    /// Container layout: a magic line, a one-line JSON header, then the
    /// JSON payload.
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let header = ModelHeader {
            kind: self.kind(),
            version: MODEL_VERSION,
            classes: self.classes(),
            features: self.feature_pipeline().to_string(),
        };
        writeln!(w, "{MODEL_MAGIC}")?;
        writeln!(w, "{}", serde_json::to_string(&header).map_err(json_err)?)?;
        serde_json::to_writer(&mut *w, self).map_err(json_err)?;
        writeln!(w)?;
        Ok(())
    }

    pub fn read_from(r: impl Read) -> Result<Self> {
        let mut r = BufReader::new(r);
        let mut line = String::new();
        r.read_line(&mut line)?;
        if line.trim_end() != MODEL_MAGIC {
            return Err(OmrError::ModelFormat("missing model-file magic".into()));
        }
        line.clear();
        r.read_line(&mut line)?;
        let header: ModelHeader = serde_json::from_str(&line).map_err(|e| OmrError::ModelFormat(format!("header: {e}")))?;
        if header.version != MODEL_VERSION {
            return Err(OmrError::ModelFormat(format!(
                "version {} is not supported (expected {MODEL_VERSION})",
                header.version
            )));
        }
        let model: TrainedModel = serde_json::from_reader(r).map_err(|e| OmrError::ModelFormat(format!("payload: {e}")))?;
        if model.kind() != header.kind || model.classes() != header.classes {
            return Err(OmrError::ModelFormat("header does not describe the payload".into()));
        }
        Ok(model)
    }

    fn feature_pipeline(&self) -> &'static str {
        match self {
            TrainedModel::Threshold(_) => "otsu-black-fraction",
            TrainedModel::Baseline(_) => "mean-intensity-rgb",
            TrainedModel::Nbc(_) => "handcrafted-12",
            TrainedModel::Bovw(_) => "harris-surf64-bovw",
            TrainedModel::Cnn(_) => "rgb-raster",
        }
    }
}

pub const MODEL_MAGIC: &str = "omr-model";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelHeader {
    pub kind: ModelKind,
    pub version: u32,
    pub classes: ClassSet,
    pub features: String,
}

fn json_err(e: serde_json::Error) -> OmrError {
    OmrError::ModelFormat(e.to_string())
}

impl BoxClassifier for TrainedModel {
    fn name(&self) -> String {
        self.kind().to_string()
    }

    fn classes(&self) -> ClassSet {
        TrainedModel::classes(self)
    }

    fn classify(&self, roi: &RoiImage) -> Result<ClassScores> {
        TrainedModel::classify(self, roi)
    }
}

/// Training recipe for one model kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ClassifierConfig {
    Threshold(ThresholdClassifier),
    Baseline(SvmConfig),
    Nbc(NbcConfig),
    Bovw(BovwConfig),
    Cnn(CnnConfig),
}

impl ClassifierConfig {
    /// Defaults per kind. Naive Bayes fixes the crossed-out prior at 5%.
    pub fn default_for(kind: ModelKind) -> Self {
        match kind {
            ModelKind::Threshold => ClassifierConfig::Threshold(ThresholdClassifier::default()),
            ModelKind::Baseline => ClassifierConfig::Baseline(SvmConfig::default()),
            ModelKind::Nbc => ClassifierConfig::Nbc(NbcConfig::with_prior(AnswerClass::CrossedOut, 0.05)),
            ModelKind::Bovw => ClassifierConfig::Bovw(BovwConfig::default()),
            ModelKind::Cnn => ClassifierConfig::Cnn(CnnConfig::default()),
        }
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            ClassifierConfig::Threshold(_) => ModelKind::Threshold,
            ClassifierConfig::Baseline(_) => ModelKind::Baseline,
            ClassifierConfig::Nbc(_) => ModelKind::Nbc,
            ClassifierConfig::Bovw(_) => ModelKind::Bovw,
            ClassifierConfig::Cnn(_) => ModelKind::Cnn,
        }
    }

    /// Trains on the samples whose label is in `classes`; others are ignored.
    pub fn train_model(&self, samples: &[&LabeledSample], classes: ClassSet, seed: u64) -> Result<TrainedModel> {
        let kept: Vec<&LabeledSample> = samples.iter().copied().filter(|s| classes.contains(s.label)).collect();
        let rois: Vec<&RoiImage> = kept.iter().map(|s| &s.roi).collect();
        let labels: Vec<AnswerClass> = kept.iter().map(|s| s.label).collect();
        Ok(match self {
            ClassifierConfig::Threshold(t) => TrainedModel::Threshold(*t),
            ClassifierConfig::Baseline(cfg) => {
                TrainedModel::Baseline(train_baseline_svm(&rois, &labels, classes, cfg, seed)?)
            }
            ClassifierConfig::Nbc(cfg) => {
                let x = rois
                    .iter()
                    .map(|r| handcrafted_vector(r).map(|v| v.0.to_vec()))
                    .collect::<Result<Vec<_>>>()?;
                let cfg = NbcConfig {
                    prior_override: cfg
                        .prior_override
                        .iter()
                        .filter(|(c, _)| classes.contains(**c))
                        .map(|(c, p)| (*c, *p))
                        .collect(),
                };
                TrainedModel::Nbc(train_nbc(&x, &labels, classes, &cfg)?)
            }
            ClassifierConfig::Bovw(cfg) => TrainedModel::Bovw(train_bovw(&rois, &labels, classes, cfg, seed)?),
            ClassifierConfig::Cnn(cfg) => TrainedModel::Cnn(train_cnn(&rois, &labels, classes, cfg, seed)?),
        })
    }
}

impl Trainer for ClassifierConfig {
    fn name(&self) -> String {
        self.kind().to_string()
    }

    fn train(&self, samples: &[&LabeledSample], classes: ClassSet, seed: u64) -> Result<Arc<dyn BoxClassifier>> {
        Ok(Arc::new(self.train_model(samples, classes, seed)?))
    }
}

/// Classifies `roi` with `model`.
pub fn classify(model: &TrainedModel, roi: &RoiImage) -> Result<ClassScores> {
    model.classify(roi)
}
