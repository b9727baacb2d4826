use serde::{Deserialize, Serialize};

use super::classes::{AnswerClass, ClassSet, ClassScores};
use super::kmeans::{build_vocabulary, encode_bovw, KmeansConfig, Vocabulary};
use super::svm::{check_training_set, LinearSvm, SvmConfig};
use crate::error::Result;
use crate::features::{descriptor_bag, BagConfig, DescriptorBag, RoiImage};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BovwConfig {
    pub bag: BagConfig,
    pub kmeans: KmeansConfig,
    pub svm: SvmConfig,
}

/// Visual-word vocabulary plus one-vs-all linear SVMs on word histograms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BovwModel {
    pub bag: BagConfig,
    pub vocabulary: Vocabulary,
    pub svm: LinearSvm,
}

/// Trains on precomputed descriptor bags. The vocabulary sees only `bags`.
pub fn train_bovw_bags(
    bags: &[&DescriptorBag],
    labels: &[AnswerClass],
    classes: ClassSet,
    config: &BovwConfig,
    seed: u64,
) -> Result<BovwModel> {
    check_training_set(labels, classes, 1)?;
    let owned: Vec<DescriptorBag> = bags.iter().map(|b| (*b).clone()).collect();
    let vocabulary = build_vocabulary(&owned, &config.kmeans, seed)?;
    let hists: Vec<Vec<f64>> = bags.iter().map(|b| encode_bovw(&vocabulary, b)).collect();
    let svm = LinearSvm::train(&hists, labels, classes, &config.svm, seed)?;
    Ok(BovwModel {
        bag: config.bag.clone(),
        vocabulary,
        svm,
    })
}

pub fn train_bovw(
    rois: &[&RoiImage],
    labels: &[AnswerClass],
    classes: ClassSet,
    config: &BovwConfig,
    seed: u64,
) -> Result<BovwModel> {
    let bags = rois
        .iter()
        .map(|r| descriptor_bag(r, &config.bag))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&DescriptorBag> = bags.iter().collect();
    train_bovw_bags(&refs, labels, classes, config, seed)
}

impl BovwModel {
    pub fn classes(&self) -> ClassSet {
        self.svm.classes
    }

    pub fn classify_bag(&self, bag: &DescriptorBag) -> Result<ClassScores> {
        self.svm.scores(&encode_bovw(&self.vocabulary, bag))
    }

    pub fn classify(&self, roi: &RoiImage) -> Result<ClassScores> {
        self.classify_bag(&descriptor_bag(roi, &self.bag)?)
    }
}
