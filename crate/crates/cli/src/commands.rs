use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use omr_core::classifiers::{AnswerClass, ClassSet, ClassifierConfig, CnnConfig, ModelKind};
use omr_core::dataset::{
    augment_samples, collect_labeled_samples, load_metadata, save_metadata, AugmentationConfig, LabelTable,
    LabeledSample, Perturbation, SynthConfig,
};
use omr_core::eval::{cross_validate, render_table, EvalReport};
use omr_core::grading::{FileFailure, Grader, RunReport, SheetGrade};
use omr_core::registration::RegistrationConfig;
use omr_core::strategy::{StrategyKind, STAGE1_CLASSES, STAGE2_CLASSES};
use omr_core::{OmrError, Result};

use crate::data::{list_images, reference_features, register_all, require_exists, write_atomic, StrategyFile};
use crate::report::{to_csv, to_xml, ReportRow};
use crate::{CnnPreset, EvalArgs, ExamArgs, GradeArgs, LabeledArgs, ReportFormat, SynthArgs, TrainArgs, EXIT_REGISTRATION};

pub const STRATEGY_FILE: &str = "strategy.json";
pub const MODEL_EXTENSION: &str = "omr";

fn check_exam(exam: &ExamArgs) -> Result<()> {
    for r in &exam.references {
        require_exists(r, "reference image")?;
    }
    require_exists(&exam.metadata, "metadata file")
}

fn json_pretty<T: serde::Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report serializes");
    s.push('\n');
    s
}

/// Registered, labeled boxes of every sheet, plus crossed-out augmentation
/// unless disabled. Sheets that fail to register are skipped with a warning.
pub fn load_samples(args: &LabeledArgs, registration: &RegistrationConfig) -> Result<Vec<LabeledSample>> {
    check_exam(&args.exam)?;
    require_exists(&args.sheets, "sheet directory")?;
    require_exists(&args.labels, "label file")?;
    let meta = load_metadata(&args.exam.metadata)?;
    let labels = LabelTable::load(&args.labels)?;
    let references = reference_features(&args.exam.references, registration)?;
    let files = list_images(&args.sheets)?;
    let (registered, failures) = register_all(&references, &files, registration);
    for f in &failures {
        eprintln!("warning: skipping {}: {}: {}", f.file, f.error, f.message);
    }
    let samples = collect_labeled_samples(&registered, &meta, &labels)?;
    if args.no_augment {
        Ok(samples)
    } else {
        augment_samples(&samples, &AugmentationConfig::default())
    }
}

pub fn classifier_config(kind: ModelKind, cnn: CnnPreset, overrides: Option<&ClassifierConfig>) -> ClassifierConfig {
    if let Some(c) = overrides.filter(|c| c.kind() == kind) {
        return c.clone();
    }
    match (kind, cnn) {
        (ModelKind::Cnn, CnnPreset::Compact) => ClassifierConfig::Cnn(CnnConfig::compact()),
        (ModelKind::Cnn, CnnPreset::Desk) => ClassifierConfig::Cnn(CnnConfig::desk()),
        _ => ClassifierConfig::default_for(kind),
    }
}

/// (file stem, kind, class set) of every model a strategy needs.
fn training_plan(args: &TrainArgs) -> Result<Vec<(&'static str, ModelKind, ClassSet)>> {
    let spec = |m: &str| Err(OmrError::SpecInvalid(m.to_string()));
    match args.strategy {
        StrategyKind::StraightForward => {
            if args.stage1.is_some() || args.stage2.is_some() {
                return spec("--stage1/--stage2 belong to a two-stage strategy");
            }
            let Some(kind) = args.classifier else {
                return spec("a straight-forward strategy needs --classifier");
            };
            let classes = match args.classes {
                Some(letter) => ClassSet::from_letter(letter)?,
                None => ClassSet::ALL,
            };
            if classes != ClassSet::ALL {
                return spec(&format!(
                    "a straight-forward strategy needs all three classes (a), not {classes}"
                ));
            }
            Ok(vec![("model", kind, ClassSet::ALL)])
        }
        StrategyKind::TwoStage => {
            if args.classifier.is_some() || args.classes.is_some() {
                return spec("a two-stage strategy takes --stage1 and --stage2; its class sets are fixed");
            }
            let (Some(s1), Some(s2)) = (args.stage1, args.stage2) else {
                return spec("a two-stage strategy needs --stage1 and --stage2");
            };
            Ok(vec![("stage1", s1, STAGE1_CLASSES), ("stage2", s2, STAGE2_CLASSES)])
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub descriptor: PathBuf,
    pub models: Vec<PathBuf>,
    pub samples: usize,
}

pub fn train(args: &TrainArgs) -> Result<TrainOutcome> {
    let plan = training_plan(args)?;
    let overrides = match &args.config {
        Some(p) => Some(
            serde_json::from_str::<ClassifierConfig>(&fs::read_to_string(p)?).map_err(|e| OmrError::ParseError {
                location: p.display().to_string(),
                message: e.to_string(),
            })?,
        ),
        None => None,
    };
    let samples = load_samples(&args.data, &RegistrationConfig::default())?;
    let refs: Vec<&LabeledSample> = samples.iter().collect();
    fs::create_dir_all(&args.out)?;
    let mut models = Vec::new();
    for (stem, kind, classes) in &plan {
        let config = classifier_config(*kind, args.cnn, overrides.as_ref());
        let model = config.train_model(&refs, *classes, args.seed)?;
        let path = args.out.join(format!("{stem}.{MODEL_EXTENSION}"));
        let mut bytes = Vec::new();
        model.write_to(&mut bytes)?;
        write_atomic(&path, &bytes)?;
        eprintln!("trained {kind} on {classes}: {}", path.display());
        models.push(path);
    }
    let relative = |p: &Path| PathBuf::from(p.file_name().expect("model path has a name"));
    let descriptor = StrategyFile {
        strategy: args.strategy,
        stage1: relative(&models[0]),
        stage2: models.get(1).map(|p| relative(p)),
    };
    let path = args.out.join(STRATEGY_FILE);
    descriptor.write(&path)?;
    Ok(TrainOutcome {
        descriptor: path,
        models,
        samples: samples.len(),
    })
}

#[derive(Debug, Clone)]
pub struct GradeOutcome {
    pub grades: Vec<SheetGrade>,
    pub run: RunReport,
}

fn is_registration_error(name: &str) -> bool {
    matches!(
        name,
        "RegistrationFailed" | "InsufficientMatches" | "NoConsensus" | "SingularTransform"
    )
}

impl GradeOutcome {
    /// 0 when every sheet was graded, 2 when any sheet failed to register,
    /// 1 for other failures.
    pub fn exit_code(&self) -> ExitCode {
        if self.run.failures.is_empty() {
            ExitCode::SUCCESS
        } else if self.run.failures.iter().any(|f| is_registration_error(&f.error)) {
            ExitCode::from(EXIT_REGISTRATION)
        } else {
            ExitCode::FAILURE
        }
    }

    pub fn rows(&self) -> Vec<ReportRow> {
        report_rows(&self.grades)
    }
}

pub fn report_rows(grades: &[SheetGrade]) -> Vec<ReportRow> {
    grades
        .iter()
        .map(|g| ReportRow {
            image: g.sheet_id.clone(),
            grade: g.total,
        })
        .collect()
}

pub fn build_grader(exam: &ExamArgs, strategy: &Path, review_threshold: f64) -> Result<Grader> {
    check_exam(exam)?;
    require_exists(strategy, "strategy descriptor")?;
    let registration = RegistrationConfig::default();
    Ok(Grader {
        references: reference_features(&exam.references, &registration)?,
        metadata: load_metadata(&exam.metadata)?,
        strategy: StrategyFile::load(strategy)?,
        registration,
        review_threshold,
    })
}

/// Grades `files`, keeping successes in input order.
pub fn grade_files(grader: &Grader, files: &[PathBuf], concurrency: usize) -> GradeOutcome {
    let (results, run) = grader.grade_batch(files, concurrency);
    GradeOutcome {
        grades: results.into_iter().filter_map(|r| r.ok()).collect(),
        run,
    }
}

pub fn grade(args: &GradeArgs) -> Result<GradeOutcome> {
    if !(0.0..=1.0).contains(&args.review_threshold) {
        return Err(OmrError::ConfigInvalid("review threshold must be in [0, 1]".into()));
    }
    require_exists(&args.sheets, "sheet directory")?;
    let grader = build_grader(&args.exam, &args.strategy, args.review_threshold)?;
    let files = list_images(&args.sheets)?;
    let outcome = grade_files(&grader, &files, args.concurrency);
    fs::create_dir_all(&args.out)?;
    let rows = outcome.rows();
    for format in &args.format {
        match format {
            ReportFormat::Csv => write_atomic(&args.out.join("report.csv"), to_csv(&rows).as_bytes())?,
            ReportFormat::Xml => write_atomic(&args.out.join("report.xml"), to_xml(&rows).as_bytes())?,
        }
    }
    write_atomic(&args.out.join("grades.json"), json_pretty(&outcome.grades).as_bytes())?;
    write_atomic(&args.out.join("run.json"), json_pretty(&outcome.run).as_bytes())?;
    for FileFailure { file, error, message } in &outcome.run.failures {
        eprintln!("failed: {file}: {error}: {message}");
    }
    eprintln!("graded {}/{} sheets", outcome.run.graded, outcome.run.sheets);
    Ok(outcome)
}

/// Whether a model of `kind` can be scored on `classes`.
fn supports(kind: ModelKind, classes: ClassSet) -> bool {
    kind != ModelKind::Threshold
        || (classes.contains(AnswerClass::Confirmed) && classes.contains(AnswerClass::Empty))
}

pub fn eval(args: &EvalArgs) -> Result<Vec<EvalReport>> {
    let subsets = args
        .subsets
        .chars()
        .map(ClassSet::from_letter)
        .collect::<Result<Vec<_>>>()?;
    let samples = load_samples(&args.data, &RegistrationConfig::default())?;
    let mut reports = Vec::new();
    for &kind in &args.classifiers {
        let config = classifier_config(kind, args.cnn, None);
        for &classes in &subsets {
            if !supports(kind, classes) {
                eprintln!("skipping {kind} on {classes}: it cannot predict those classes");
                continue;
            }
            let cv = cross_validate(&samples, &config, classes, args.k, args.seed)?;
            reports.push(cv.report);
        }
    }
    fs::create_dir_all(&args.out)?;
    let mut text = render_table(&reports);
    for r in &reports {
        text.push('\n');
        text.push_str(&r.to_text());
    }
    write_atomic(&args.out.join("eval.json"), json_pretty(&reports).as_bytes())?;
    write_atomic(&args.out.join("eval.txt"), text.as_bytes())?;
    print!("{}", render_table(&reports));
    Ok(reports)
}

pub fn synth_config(args: &SynthArgs) -> Result<SynthConfig> {
    if !(args.noise >= 0.0 && args.noise.is_finite()) {
        return Err(OmrError::ConfigInvalid("noise scale must be finite and ≥ 0".into()));
    }
    let mixture: [f64; 3] = args
        .mixture
        .as_slice()
        .try_into()
        .map_err(|_| OmrError::ConfigInvalid("mixture needs three probabilities".into()))?;
    let p = Perturbation::default();
    Ok(SynthConfig {
        seed: args.seed,
        exam_id: args.exam_id.clone(),
        sheets: args.sheets,
        questions: args.questions,
        choices: args.choices,
        mixture,
        perturbation: Perturbation {
            max_rotation_deg: p.max_rotation_deg * args.noise,
            max_shift_px: p.max_shift_px * args.noise,
            noise_sigma: p.noise_sigma * args.noise,
            blur_sigma: p.blur_sigma * args.noise,
        },
        ..SynthConfig::default()
    })
}

#[derive(Debug, Clone)]
pub struct SynthOutcome {
    pub reference: PathBuf,
    pub metadata: PathBuf,
    pub sheets: PathBuf,
    pub labels: PathBuf,
    pub truth: PathBuf,
}

/// Writes `reference.png`, `metadata.json`, `labels.csv`, `truth.csv`
/// (true grades) and `sheets/*.png` under `--out`.
pub fn synth(args: &SynthArgs) -> Result<SynthOutcome> {
    let config = synth_config(args)?;
    let exam = omr_core::dataset::generate_synthetic_exam(&config)?;
    let out = &args.out;
    let sheets = out.join("sheets");
    fs::create_dir_all(&sheets)?;
    let reference = out.join("reference.png");
    exam.reference.save(&reference)?;
    let metadata = out.join("metadata.json");
    save_metadata(&exam.metadata, &metadata)?;
    let mut labels = LabelTable::new();
    let mut truth = Vec::new();
    for s in &exam.sheets {
        let file = format!("{}.png", s.name);
        s.image.save(sheets.join(&file))?;
        for (q, row) in s.labels.iter().enumerate() {
            for (c, &class) in row.iter().enumerate() {
                labels.insert(&file, exam.metadata.questions[q].index, c, class);
            }
        }
        truth.push(ReportRow {
            image: file,
            grade: s.grade,
        });
    }
    truth.sort_by(|a, b| a.image.cmp(&b.image));
    let labels_path = out.join("labels.csv");
    labels.save(&labels_path)?;
    let truth_path = out.join("truth.csv");
    write_atomic(&truth_path, to_csv(&truth).as_bytes())?;
    write_atomic(&out.join("synth.json"), json_pretty(&config).as_bytes())?;
    Ok(SynthOutcome {
        reference,
        metadata,
        sheets,
        labels: labels_path,
        truth: truth_path,
    })
}

