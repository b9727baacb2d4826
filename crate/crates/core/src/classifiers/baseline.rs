use serde::{Deserialize, Serialize};

use super::classes::{AnswerClass, ClassSet, ClassScores};
use super::svm::{check_training_set, LinearSvm, SvmConfig};
use crate::error::Result;
use crate::features::{mean_intensity, RoiImage};

/// Linear SVM over the mean intensity of each color channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineModel {
    pub svm: LinearSvm,
}

pub fn train_baseline_svm(
    rois: &[&RoiImage],
    labels: &[AnswerClass],
    classes: ClassSet,
    config: &SvmConfig,
    seed: u64,
) -> Result<BaselineModel> {
    check_training_set(labels, classes, 2)?;
    let x: Vec<Vec<f64>> = rois.iter().map(|r| mean_intensity(r).to_vec()).collect();
    Ok(BaselineModel {
        svm: LinearSvm::train(&x, labels, classes, config, seed)?,
    })
}

impl BaselineModel {
    pub fn classes(&self) -> ClassSet {
        self.svm.classes
    }

    pub fn classify(&self, roi: &RoiImage) -> Result<ClassScores> {
        self.svm.scores(&mean_intensity(roi))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::{ColorImage, Rgb};

    fn solid(v: u8) -> RoiImage {
        RoiImage::new(ColorImage::from_pixel(10, 10, Rgb([v, v, v])))
    }

    #[test]
    fn black_and_white_are_separable() {
        let rois = [solid(0), solid(10), solid(250), solid(255)];
        let refs: Vec<&RoiImage> = rois.iter().collect();
        let labels = [
            AnswerClass::Confirmed,
            AnswerClass::Confirmed,
            AnswerClass::Empty,
            AnswerClass::Empty,
        ];
        let m = train_baseline_svm(&refs, &labels, ClassSet::CONFIRMED_EMPTY, &SvmConfig::default(), 0).unwrap();
        for (r, l) in rois.iter().zip(labels) {
            assert_eq!(m.classify(r).unwrap().predicted, l);
        }
    }
}
