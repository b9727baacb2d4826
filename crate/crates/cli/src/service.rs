//! Local HTTP API under `/v1`: images, exam metadata, classification
//! previews, grading jobs, the review queue and box overrides.
//!
//! The service holds no grading logic of its own; it drives the same
//! [`Grader`] as the `grade` command.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use omr_core::classifiers::{AnswerClass, ClassScores};
use omr_core::dataset::{ExamMetadata, Rect};
use omr_core::grading::{extract_rois, page_from_name, Grader, QuestionResult, RunReport, SheetGrade};
use omr_core::registration::{register_sheet, ReferenceFeatures, RegistrationConfig};
use omr_core::strategy::Strategy;
use omr_core::{OmrError, Result};
use serde::{Deserialize, Serialize};

use crate::data::{file_name, list_images, load_image, reference_features, write_atomic, StrategyFile};
use crate::ServeArgs;

/// Structured error payload: the pipeline's error name plus a message, and
/// the violated invariant for validation errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub field: Option<String>,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: ErrorBody,
}

impl ApiError {
    fn not_found(what: impl Into<String>) -> Self {
        ApiError {
            status: StatusCode::NOT_FOUND,
            body: ErrorBody {
                error: "NotFound".into(),
                message: what.into(),
                field: None,
            },
        }
    }
}

impl From<OmrError> for ApiError {
    fn from(e: OmrError) -> Self {
        let status = match &e {
            OmrError::Io(_) | OmrError::Image(_) | OmrError::ModelFormat(_) => StatusCode::INTERNAL_SERVER_ERROR,
            OmrError::RegistrationFailed(_)
            | OmrError::InsufficientMatches { .. }
            | OmrError::NoConsensus { .. }
            | OmrError::SingularTransform { .. } => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::BAD_REQUEST,
        };
        let field = match &e {
            OmrError::ValidationError { invariant, .. } => Some(invariant.clone()),
            _ => None,
        };
        ApiError {
            status,
            body: ErrorBody {
                error: e.name().into(),
                message: e.to_string(),
                field,
            },
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

type ApiResult<T> = std::result::Result<T, ApiError>;

fn parse_body<T: for<'de> Deserialize<'de>>(bytes: &Bytes) -> ApiResult<T> {
    let bytes = if bytes.is_empty() { &b"{}"[..] } else { &bytes[..] };
    serde_json::from_slice(bytes).map_err(|e| {
        OmrError::ParseError {
            location: format!("request body line {} column {}", e.line(), e.column()),
            message: e.to_string(),
        }
        .into()
    })
}

fn internal(e: impl std::fmt::Display) -> ApiError {
    OmrError::Io(std::io::Error::other(e.to_string())).into()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobState {
    Running,
    Done,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradeResult {
    pub strategy: String,
    pub grades: Vec<SheetGrade>,
    pub run: RunReport,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JobStatus {
    pub job: usize,
    pub state: JobState,
    pub done: usize,
    pub total: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<GradeResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<ErrorBody>,
}

struct Job {
    state: JobState,
    done: Arc<AtomicUsize>,
    total: usize,
    result: Option<GradeResult>,
    error: Option<ErrorBody>,
}

pub struct AppState {
    pub references: Vec<PathBuf>,
    pub reference_features: Vec<ReferenceFeatures>,
    pub metadata_path: PathBuf,
    pub sheets_dir: PathBuf,
    pub models_dir: PathBuf,
    pub review_threshold: f64,
    pub concurrency: usize,
    pub registration: RegistrationConfig,
    metadata: RwLock<ExamMetadata>,
    grades: RwLock<BTreeMap<String, SheetGrade>>,
    strategies: Mutex<HashMap<String, Strategy>>,
    jobs: Mutex<Vec<Job>>,
    /// Grading runs of the exam are serialized.
    grading: tokio::sync::Mutex<()>,
}

impl AppState {
    pub fn load(args: &ServeArgs) -> Result<Self> {
        let registration = RegistrationConfig::default();
        let metadata = omr_core::dataset::load_metadata(&args.exam.metadata)?;
        for (what, p) in [("sheet directory", &args.sheets), ("model directory", &args.models)] {
            crate::data::require_exists(p, what)?;
        }
        if !(0.0..=1.0).contains(&args.review_threshold) {
            return Err(OmrError::ConfigInvalid("review threshold must be in [0, 1]".into()));
        }
        check_pages(&metadata, args.exam.references.len())?;
        Ok(AppState {
            reference_features: reference_features(&args.exam.references, &registration)?,
            references: args.exam.references.clone(),
            metadata_path: args.exam.metadata.clone(),
            sheets_dir: args.sheets.clone(),
            models_dir: args.models.clone(),
            review_threshold: args.review_threshold,
            concurrency: args.concurrency.max(1),
            registration,
            metadata: RwLock::new(metadata),
            grades: RwLock::new(BTreeMap::new()),
            strategies: Mutex::new(HashMap::new()),
            jobs: Mutex::new(Vec::new()),
            grading: tokio::sync::Mutex::new(()),
        })
    }

    pub fn metadata(&self) -> ExamMetadata {
        self.metadata.read().expect("metadata lock").clone()
    }

    fn sheet_path(&self, name: &str) -> ApiResult<PathBuf> {
        if name.contains(['/', '\\']) || name.starts_with('.') {
            return Err(ApiError::not_found(format!("sheet `{name}`")));
        }
        let path = self.sheets_dir.join(name);
        if path.is_file() {
            Ok(path)
        } else {
            Err(ApiError::not_found(format!("sheet `{name}`")))
        }
    }

    /// Names of the strategy descriptors in the model directory.
    pub fn strategy_names(&self) -> Result<Vec<String>> {
        let mut names: Vec<String> = std::fs::read_dir(&self.models_dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "json"))
            .filter_map(|p| p.file_stem().and_then(|s| s.to_str()).map(String::from))
            .collect();
        names.sort();
        Ok(names)
    }

    /// The named descriptor, or the only/first one when no name is given.
    fn strategy(&self, name: Option<&str>) -> ApiResult<Strategy> {
        let names = self.strategy_names()?;
        let name = match name {
            Some(n) if names.iter().any(|x| x == n) => n.to_string(),
            Some(n) => return Err(ApiError::not_found(format!("strategy `{n}`"))),
            None => names
                .first()
                .cloned()
                .ok_or_else(|| ApiError::not_found("no strategy descriptors are available"))?,
        };
        if let Some(s) = self.strategies.lock().expect("strategy cache").get(&name) {
            return Ok(s.clone());
        }
        let strategy = StrategyFile::load(&self.models_dir.join(format!("{name}.json")))?;
        self.strategies
            .lock()
            .expect("strategy cache")
            .insert(name, strategy.clone());
        Ok(strategy)
    }

    fn grader(&self, strategy: Strategy) -> Grader {
        Grader {
            references: self.reference_features.clone(),
            metadata: self.metadata(),
            strategy,
            registration: self.registration.clone(),
            review_threshold: self.review_threshold,
        }
    }
}

fn check_pages(meta: &ExamMetadata, references: usize) -> Result<()> {
    if meta.pages > references {
        return Err(OmrError::ValidationError {
            invariant: "page-count".into(),
            message: format!("{} pages but only {references} reference images", meta.pages),
        });
    }
    Ok(())
}

pub type SharedState = Arc<AppState>;

pub fn router(state: SharedState) -> Router {
    Router::new()
        .route("/v1/health", get(health))
        .route("/v1/images", get(list_all_images))
        .route("/v1/images/reference/{page}", get(reference_image))
        .route("/v1/images/sheets/{name}", get(sheet_image))
        .route("/v1/metadata", get(get_metadata).put(put_metadata))
        .route("/v1/strategies", get(list_strategies))
        .route("/v1/classify-preview", post(classify_preview))
        .route("/v1/grade", post(start_grade))
        .route("/v1/grade/{job}", get(job_status))
        .route("/v1/grades", get(list_grades))
        .route("/v1/review-queue", get(review_queue))
        .route("/v1/override", post(override_box))
        .with_state(state)
}

pub fn serve(args: &ServeArgs) -> Result<()> {
    let state = Arc::new(AppState::load(args)?);
    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind(&args.addr).await?;
        eprintln!("listening on http://{}", listener.local_addr()?);
        axum::serve(listener, router(state)).await
    })?;
    Ok(())
}

async fn health() -> Json<serde_json::Value> {
    Json(serde_json::json!({ "status": "ok" }))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ImageList {
    pub references: Vec<String>,
    pub sheets: Vec<String>,
}

async fn list_all_images(State(state): State<SharedState>) -> ApiResult<Json<ImageList>> {
    let sheets = list_images(&state.sheets_dir)?.iter().map(|p| file_name(p)).collect();
    let references = (1..=state.references.len())
        .map(|p| format!("/v1/images/reference/{p}"))
        .collect();
    Ok(Json(ImageList { references, sheets }))
}

fn image_response(path: &Path) -> ApiResult<Response> {
    let bytes = std::fs::read(path).map_err(OmrError::from)?;
    let mime = match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("png") => "image/png",
        Some("jpg" | "jpeg") => "image/jpeg",
        Some("bmp") => "image/bmp",
        Some("tif" | "tiff") => "image/tiff",
        _ => "application/octet-stream",
    };
    Ok(([(header::CONTENT_TYPE, mime)], bytes).into_response())
}

/// `page` is 1-based.
async fn reference_image(State(state): State<SharedState>, UrlPath(page): UrlPath<usize>) -> ApiResult<Response> {
    let path = page
        .checked_sub(1)
        .and_then(|p| state.references.get(p))
        .ok_or_else(|| ApiError::not_found(format!("reference page {page}")))?;
    image_response(path)
}

async fn sheet_image(State(state): State<SharedState>, UrlPath(name): UrlPath<String>) -> ApiResult<Response> {
    image_response(&state.sheet_path(&name)?)
}

fn metadata_response(meta: &ExamMetadata) -> ApiResult<Response> {
    Ok(([(header::CONTENT_TYPE, "application/json")], meta.to_json()?).into_response())
}

async fn get_metadata(State(state): State<SharedState>) -> ApiResult<Response> {
    metadata_response(&state.metadata())
}

/// Validates the whole document, writes it atomically, then swaps it in. A
/// rejected document leaves both the file and the served copy untouched.
async fn put_metadata(State(state): State<SharedState>, body: Bytes) -> ApiResult<Response> {
    let text = std::str::from_utf8(&body).map_err(|e| OmrError::ParseError {
        location: "request body".into(),
        message: e.to_string(),
    })?;
    let meta = ExamMetadata::from_json(text)?;
    check_pages(&meta, state.references.len())?;
    let mut guard = state.metadata.write().expect("metadata lock");
    write_atomic(&state.metadata_path, meta.to_json()?.as_bytes())?;
    *guard = meta;
    metadata_response(&guard)
}

async fn list_strategies(State(state): State<SharedState>) -> ApiResult<Json<Vec<String>>> {
    Ok(Json(state.strategy_names()?))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PreviewRequest {
    pub sheet: String,
    pub question: usize,
    pub choice: usize,
    /// Crop this rectangle of the registered sheet instead of the stored box.
    #[serde(default)]
    pub rect: Option<Rect>,
    #[serde(default)]
    pub strategy: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PreviewResponse {
    pub sheet: String,
    pub question: usize,
    pub choice: usize,
    pub scores: ClassScores,
}

async fn classify_preview(State(state): State<SharedState>, body: Bytes) -> ApiResult<Json<PreviewResponse>> {
    let req: PreviewRequest = parse_body(&body)?;
    let path = state.sheet_path(&req.sheet)?;
    let strategy = state.strategy(req.strategy.as_deref())?;
    let meta = state.metadata();
    let q = meta.question(req.question)?;
    if req.choice >= q.choices.len() {
        return Err(OmrError::ValidationError {
            invariant: "choice-range".into(),
            message: format!("question {} has no choice {}", req.question, req.choice),
        }
        .into());
    }
    let (sheet, question, choice) = (req.sheet.clone(), req.question, req.choice);
    let st = state.clone();
    let scores = tokio::task::spawn_blocking(move || -> Result<ClassScores> {
        let page = page_from_name(&req.sheet);
        let reference = st
            .reference_features
            .get(page)
            .ok_or_else(|| OmrError::ConfigInvalid(format!("no reference image for page {}", page + 1)))?;
        let registered = register_sheet(&load_image(&path)?, reference, &st.registration)?.image;
        let roi = match req.rect {
            None => extract_rois(&registered, &meta, req.question)?.swap_remove(req.choice),
            Some(rect) => omr_core::grading::crop_rect(&registered, &rect, req.question, req.choice)?,
        };
        strategy.classify(&roi)
    })
    .await
    .map_err(internal)??;
    Ok(Json(PreviewResponse {
        sheet,
        question,
        choice,
        scores,
    }))
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct GradeRequest {
    #[serde(default)]
    pub strategy: Option<String>,
    /// Sheet file names; all sheets when absent.
    #[serde(default)]
    pub sheets: Option<Vec<String>>,
}

#[derive(Debug, Default, Deserialize)]
pub struct GradeQuery {
    #[serde(default)]
    pub wait: bool,
}

async fn start_grade(
    State(state): State<SharedState>,
    Query(query): Query<GradeQuery>,
    body: Bytes,
) -> ApiResult<Response> {
    let req: GradeRequest = parse_body(&body)?;
    let strategy = state.strategy(req.strategy.as_deref())?;
    let files = match &req.sheets {
        None => list_images(&state.sheets_dir)?,
        Some(names) => names.iter().map(|n| state.sheet_path(n)).collect::<ApiResult<_>>()?,
    };
    let done = Arc::new(AtomicUsize::new(0));
    let job = {
        let mut jobs = state.jobs.lock().expect("job table");
        jobs.push(Job {
            state: JobState::Running,
            done: done.clone(),
            total: files.len(),
            result: None,
            error: None,
        });
        jobs.len() - 1
    };
    let st = state.clone();
    let handle = tokio::spawn(async move {
        let _exclusive = st.grading.lock().await;
        let grader = st.grader(strategy);
        let progress = done.clone();
        let concurrency = st.concurrency;
        let outcome = tokio::task::spawn_blocking(move || {
            let (results, run) = grader.grade_batch_with_progress(&files, concurrency, &|| {
                progress.fetch_add(1, Ordering::SeqCst);
            });
            GradeResult {
                strategy: grader.strategy.describe(),
                grades: results.into_iter().filter_map(|r| r.ok()).collect(),
                run,
            }
        })
        .await;
        let mut jobs = st.jobs.lock().expect("job table");
        let entry = &mut jobs[job];
        match outcome {
            Ok(result) => {
                let mut grades = st.grades.write().expect("grade store");
                for g in &result.grades {
                    grades.insert(g.sheet_id.clone(), g.clone());
                }
                entry.state = JobState::Done;
                entry.result = Some(result);
            }
            Err(e) => {
                entry.state = JobState::Failed;
                entry.error = Some(internal(e).body);
            }
        }
    });
    if query.wait {
        handle.await.map_err(internal)?;
        let status = job_snapshot(&state, job)?;
        return Ok((StatusCode::OK, Json(status)).into_response());
    }
    let status = job_snapshot(&state, job)?;
    Ok((StatusCode::ACCEPTED, Json(status)).into_response())
}

fn job_snapshot(state: &AppState, id: usize) -> ApiResult<JobStatus> {
    let jobs = state.jobs.lock().expect("job table");
    let job = jobs.get(id).ok_or_else(|| ApiError::not_found(format!("job {id}")))?;
    Ok(JobStatus {
        job: id,
        state: job.state,
        done: job.done.load(Ordering::SeqCst),
        total: job.total,
        result: job.result.clone(),
        error: job.error.clone(),
    })
}

async fn job_status(State(state): State<SharedState>, UrlPath(job): UrlPath<usize>) -> ApiResult<Json<JobStatus>> {
    Ok(Json(job_snapshot(&state, job)?))
}

async fn list_grades(State(state): State<SharedState>) -> Json<Vec<SheetGrade>> {
    Json(state.grades.read().expect("grade store").values().cloned().collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FlagReason {
    LowConfidence,
    AmbiguousCancel,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReviewItem {
    pub sheet: String,
    pub min_confidence: f64,
    pub reasons: Vec<FlagReason>,
    pub question: QuestionResult,
}

fn reasons(q: &QuestionResult, threshold: f64) -> Vec<FlagReason> {
    let mut r = Vec::new();
    if q.min_confidence() < threshold {
        r.push(FlagReason::LowConfidence);
    }
    let crossed = q.boxes.iter().filter(|b| b.class == AnswerClass::CrossedOut).count();
    if q.confirmed_count == 0 && crossed > 1 {
        r.push(FlagReason::AmbiguousCancel);
    }
    r
}

/// Flagged questions of every stored grade, by sheet then question.
async fn review_queue(State(state): State<SharedState>) -> Json<Vec<ReviewItem>> {
    let grades = state.grades.read().expect("grade store");
    let items = grades
        .values()
        .flat_map(|g| {
            g.flagged().map(|q| ReviewItem {
                sheet: g.sheet_id.clone(),
                min_confidence: q.min_confidence(),
                reasons: reasons(q, state.review_threshold),
                question: q.clone(),
            })
        })
        .collect();
    Json(items)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OverrideRequest {
    pub sheet: String,
    pub question: usize,
    pub choice: usize,
    /// Class code: 1 confirmed, 2 crossed out, 3 empty.
    pub class: AnswerClass,
}

async fn override_box(State(state): State<SharedState>, body: Bytes) -> ApiResult<Json<SheetGrade>> {
    let req: OverrideRequest = parse_body(&body)?;
    let meta = state.metadata();
    let mut grades = state.grades.write().expect("grade store");
    let grade = grades
        .get_mut(&req.sheet)
        .ok_or_else(|| ApiError::not_found(format!("no grade for sheet `{}`", req.sheet)))?;
    let mut edited = grade.clone();
    edited.override_box(&meta, req.question, req.choice, req.class, state.review_threshold)?;
    *grade = edited.clone();
    Ok(Json(edited))
}
