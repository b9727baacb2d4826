//! Files shared by the subcommands: sheet directories, reference images and
//! strategy descriptors.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use omr_core::classifiers::{BoxClassifier, TrainedModel};
use omr_core::grading::{page_from_name, FileFailure};
use omr_core::raster::ColorImage;
use omr_core::registration::{register_sheet, ReferenceFeatures, RegistrationConfig};
use omr_core::strategy::{Strategy, StrategyKind};
use omr_core::{OmrError, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

const IMAGE_EXTENSIONS: [&str; 6] = ["png", "jpg", "jpeg", "bmp", "tif", "tiff"];

pub fn file_name(path: &Path) -> String {
    path.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string()
}

/// Image files directly inside `dir`, sorted by name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect();
    files.sort();
    Ok(files)
}

pub fn load_image(path: &Path) -> Result<ColorImage> {
    Ok(image::open(path)?.to_rgb8())
}

pub fn require_exists(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(OmrError::ConfigInvalid(format!("{what} `{}` does not exist", path.display())))
    }
}

/// Writes through a temporary sibling and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let tmp = dir.join(format!(".{}.tmp", file_name(path)));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn reference_features(paths: &[PathBuf], config: &RegistrationConfig) -> Result<Vec<ReferenceFeatures>> {
    paths
        .iter()
        .map(|p| ReferenceFeatures::extract(&load_image(p)?, &config.detector))
        .collect()
}

/// Registers every sheet to the reference of its page. Sheets that fail are
/// reported, not fatal.
pub fn register_all(
    references: &[ReferenceFeatures],
    files: &[PathBuf],
    config: &RegistrationConfig,
) -> (Vec<(String, ColorImage)>, Vec<FileFailure>) {
    let results: Vec<(String, Result<ColorImage>)> = files
        .par_iter()
        .map(|f| {
            let name = file_name(f);
            let registered = (|| {
                let page = page_from_name(&name);
                let reference = references.get(page).ok_or_else(|| {
                    OmrError::ConfigInvalid(format!("no reference image for page {} of {name}", page + 1))
                })?;
                Ok(register_sheet(&load_image(f)?, reference, config)?.image)
            })();
            (name, registered)
        })
        .collect();
    let mut ok = Vec::new();
    let mut failures = Vec::new();
    for (name, r) in results {
        match r {
            Ok(img) => ok.push((name, img)),
            Err(e) => failures.push(FileFailure {
                file: name,
                error: e.name().to_string(),
                message: e.to_string(),
            }),
        }
    }
    (ok, failures)
}

/// Which model files make up a strategy. Paths are relative to the
/// descriptor's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyFile {
    pub strategy: StrategyKind,
    pub stage1: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage2: Option<PathBuf>,
}

impl StrategyFile {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| OmrError::ParseError {
            location: path.display().to_string(),
            message: e.to_string(),
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self).expect("descriptor serializes");
        text.push('\n');
        write_atomic(path, text.as_bytes())
    }

    /// Loads the referenced models and checks their class sets.
    pub fn load(path: &Path) -> Result<Strategy> {
        let file = Self::read(path)?;
        let dir = path.parent().unwrap_or(Path::new("."));
        let model = |p: &Path| -> Result<Arc<dyn BoxClassifier>> { Ok(Arc::new(TrainedModel::load(dir.join(p))?)) };
        match (file.strategy, &file.stage2) {
            (StrategyKind::StraightForward, None) => Strategy::straight_forward(model(&file.stage1)?),
            (StrategyKind::TwoStage, Some(s2)) => Strategy::two_stage(model(&file.stage1)?, model(s2)?),
            (StrategyKind::StraightForward, Some(_)) => Err(OmrError::SpecInvalid(
                "a straight-forward strategy takes a single model".into(),
            )),
            (StrategyKind::TwoStage, None) => {
                Err(OmrError::SpecInvalid("a two-stage strategy needs a stage-2 model".into()))
            }
        }
    }
}
