//! HTTP facade over the pose solver, silhouette renderer and dataset for
//! interactive annotation.
//!
//! Endpoints:
//!
//! | method | path                      | purpose                                   |
//! |--------|---------------------------|-------------------------------------------|
//! | GET    | `/records`                | list, filtered by `category`, `truncated`, `occluded` |
//! | GET    | `/records/{id}`           | full record plus resource URLs            |
//! | GET    | `/records/{id}/image`     | image bytes (also `/mask`, `/model`)      |
//! | POST   | `/records/{id}/solve`     | solve a pose from (edited) keypoints      |
//! | POST   | `/records/{id}/commit`    | persist a solved pose                     |
//!
//! Solves are cached per session and never touch the dataset on disk. A
//! commit rewrites the annotation document atomically and is accepted only
//! if the record has not changed since the solve it refers to.

use std::collections::HashMap;
use std::io::Write as _;
use std::net::SocketAddr;
use std::path::{Component, Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use tokio::sync::Semaphore;

use shapealign::dataset::{
    load_mesh, save_annotations, AnnotationRecord, Dataset, DatasetError, RecordFilter,
    ANNOTATION_FILE,
};
use shapealign::geometry::{project, reprojection_residuals, ImageSize};
use shapealign::pose::{solve, AlignmentSolution, AnnotationTriple, SolveMethod, SolverConfig};
use shapealign::silhouette::{outline, render_silhouette};

/// Name of the append-only commit log inside the dataset root.
pub const AUDIT_LOG: &str = "commits.log";

/// Relative tolerance between a solution's reported error and the server's
/// recomputation; larger disagreements are refused.
const ERROR_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Serialize)]
pub struct ApiError {
    #[serde(skip)]
    pub status: StatusCode,
    pub code: String,
    pub message: String,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        Self {
            status,
            code: code.into(),
            message: message.into(),
        }
    }

    fn not_found(id: &str) -> Self {
        Self::new(
            StatusCode::NOT_FOUND,
            "NotFound",
            format!("no record '{id}'"),
        )
    }

    fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "Internal", message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(&self)).into_response()
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        ApiError::new(StatusCode::BAD_REQUEST, "BadRequest", r.body_text())
    }
}

impl From<DatasetError> for ApiError {
    fn from(e: DatasetError) -> Self {
        ApiError::internal(e.to_string())
    }
}

#[derive(Debug, Clone)]
struct Solved {
    solution: AlignmentSolution,
    annotations: AnnotationTriple,
    version: u64,
}

#[derive(Debug, Default)]
struct Session {
    /// Working keypoints per record, set by the latest solve.
    edits: HashMap<String, AnnotationTriple>,
    solutions: HashMap<(String, SolveMethod), Solved>,
}

pub struct AppState {
    root: PathBuf,
    records: RwLock<Vec<AnnotationRecord>>,
    sessions: Mutex<HashMap<String, Session>>,
    commits: tokio::sync::Mutex<()>,
    solver_slots: Semaphore,
    config: SolverConfig,
}

impl AppState {
    /// Loads the dataset under `root`. At most `workers` solves run at once.
    pub fn open(root: &Path, config: SolverConfig, workers: usize) -> Result<Self, DatasetError> {
        let dataset = Dataset::open(root)?;
        for w in &dataset.warnings {
            log::warn!("record {}: {}", w.id, w.message);
        }
        Ok(Self {
            root: root.to_path_buf(),
            records: RwLock::new(dataset.records),
            sessions: Mutex::new(HashMap::new()),
            commits: tokio::sync::Mutex::new(()),
            solver_slots: Semaphore::new(workers.max(1)),
            config,
        })
    }

    fn record(&self, id: &str) -> Result<AnnotationRecord, ApiError> {
        self.records
            .read()
            .expect("records lock")
            .iter()
            .find(|r| r.id == id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(id))
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/records", get(list_records))
        .route("/records/{id}", get(get_record))
        .route("/records/{id}/{resource}", get(get_resource))
        .route("/records/{id}/solve", post(solve_record))
        .route("/records/{id}/commit", post(commit_record))
        .with_state(state)
}

pub async fn serve(state: Arc<AppState>, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Resources {
    pub image: String,
    pub mask: String,
    pub model: String,
}

impl Resources {
    fn of(id: &str) -> Self {
        Self {
            image: format!("/records/{id}/image"),
            mask: format!("/records/{id}/mask"),
            model: format!("/records/{id}/model"),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecordSummary {
    pub id: String,
    pub category: String,
    pub truncated: bool,
    pub occluded: bool,
    pub version: u64,
    pub image_size: ImageSize,
    pub n_keypoints: usize,
    pub has_pose: bool,
    pub resources: Resources,
}

async fn list_records(
    State(state): State<Arc<AppState>>,
    filter: Result<Query<RecordFilter>, axum::extract::rejection::QueryRejection>,
) -> Result<Json<Vec<RecordSummary>>, ApiError> {
    let Query(filter) =
        filter.map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "BadRequest", e.body_text()))?;
    let records = state.records.read().expect("records lock");
    Ok(Json(
        records
            .iter()
            .filter(|r| filter.matches(r))
            .map(|r| RecordSummary {
                id: r.id.clone(),
                category: r.category.clone(),
                truncated: r.truncated,
                occluded: r.occluded,
                version: r.version,
                image_size: r.image_size,
                n_keypoints: r.keypoints_3d.len(),
                has_pose: r.pose.is_some() && r.focal.is_some(),
                resources: Resources::of(&r.id),
            })
            .collect(),
    ))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecordDetail {
    pub record: AnnotationRecord,
    pub resources: Resources,
}

async fn get_record(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
) -> Result<Json<RecordDetail>, ApiError> {
    let record = state.record(&id)?;
    Ok(Json(RecordDetail {
        resources: Resources::of(&id),
        record,
    }))
}

/// Joins a dataset-relative path, refusing anything that escapes the root.
fn contained(root: &Path, relative: &str) -> Option<PathBuf> {
    let rel = Path::new(relative);
    rel.components()
        .all(|c| matches!(c, Component::Normal(_) | Component::CurDir))
        .then(|| root.join(rel))
}

fn content_type(path: &Path) -> &'static str {
    match path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
        .as_deref()
    {
        Some("png") => "image/png",
        Some("jpg") | Some("jpeg") => "image/jpeg",
        Some("pgm") => "image/x-portable-graymap",
        Some("obj") => "text/plain; charset=utf-8",
        _ => "application/octet-stream",
    }
}

async fn get_resource(
    State(state): State<Arc<AppState>>,
    UrlPath((id, resource)): UrlPath<(String, String)>,
) -> Result<Response, ApiError> {
    let record = state.record(&id)?;
    let relative = match resource.as_str() {
        "image" => &record.image_path,
        "mask" => &record.mask_path,
        "model" => &record.model_path,
        other => {
            return Err(ApiError::new(
                StatusCode::NOT_FOUND,
                "NotFound",
                format!("no resource '{other}'"),
            ))
        }
    };
    let path = contained(&state.root, relative).ok_or_else(|| {
        ApiError::new(
            StatusCode::FORBIDDEN,
            "Forbidden",
            "path leaves the dataset root",
        )
    })?;
    let bytes = tokio::fs::read(&path).await.map_err(|e| {
        ApiError::new(
            StatusCode::NOT_FOUND,
            "NotFound",
            format!("{}: {e}", path.display()),
        )
    })?;
    Ok(([(header::CONTENT_TYPE, content_type(&path))], bytes).into_response())
}

fn default_session() -> String {
    "default".into()
}

fn default_method() -> SolveMethod {
    SolveMethod::Plain
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolveRequest {
    #[serde(default = "default_session")]
    pub session: String,
    #[serde(default = "default_method")]
    pub method: SolveMethod,
    /// Edited keypoints; defaults to the session's edits, then the record's.
    #[serde(default)]
    pub keypoints_2d: Option<AnnotationTriple>,
    /// Partial [`SolverConfig`] merged over the server's configuration.
    #[serde(default)]
    pub config: Option<Value>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolveResponse {
    pub record_id: String,
    pub record_version: u64,
    pub solution: AlignmentSolution,
    /// Server-side recomputation of `solution.error`.
    pub recomputed_error: f64,
    /// Per keypoint, projection minus annotation; `null` for hidden ones.
    pub residuals: Vec<Option<[f64; 2]>>,
    /// Projection of every 3D keypoint; `null` if it falls behind the camera.
    pub projected: Vec<Option<[f64; 2]>>,
    /// Closed silhouette outlines of the posed model, in pixels.
    pub outline: Option<Vec<Vec<[f64; 2]>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub outline_error: Option<String>,
}

fn merged_config(base: &SolverConfig, overrides: Option<&Value>) -> Result<SolverConfig, ApiError> {
    let Some(overrides) = overrides else {
        return Ok(base.clone());
    };
    let bad = |m: String| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "InvalidConfig", m);
    let Value::Object(o) = overrides else {
        return Err(bad("config overrides must be an object".into()));
    };
    let mut merged = serde_json::to_value(base).expect("config serializes");
    let target = merged.as_object_mut().expect("config is an object");
    for (k, v) in o {
        if !target.contains_key(k) {
            return Err(bad(format!("unknown config field '{k}'")));
        }
        target.insert(k.clone(), v.clone());
    }
    let config: SolverConfig = serde_json::from_value(merged).map_err(|e| bad(e.to_string()))?;
    config.validate().map_err(|e| bad(e.to_string()))?;
    Ok(config)
}

fn solve_error(e: shapealign::pose::SolveError) -> ApiError {
    ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, e.code(), e.to_string())
}

fn build_response(
    state: &AppState,
    record: &AnnotationRecord,
    annotations: &AnnotationTriple,
    solution: AlignmentSolution,
) -> Result<SolveResponse, ApiError> {
    let image = record.image_size;
    let kp3d = &record.keypoints_3d;
    let recomputed = solution
        .fitted_error(kp3d, annotations, image)
        .map_err(|e| ApiError::internal(e.to_string()))?;
    if (recomputed - solution.error).abs() > ERROR_TOLERANCE * solution.error.abs().max(1e-9) {
        return Err(ApiError::internal(format!(
            "solver reported error {} but recomputation gives {recomputed}",
            solution.error
        )));
    }
    let p = solution
        .projection(image)
        .map_err(|e| ApiError::internal(e.to_string()))?;
    let target = match &solution.subset {
        Some(members) => annotations.consensus(members),
        None => annotations.consensus_all(),
    };
    let residuals = reprojection_residuals(&p, kp3d, &target)
        .map_err(|e| ApiError::internal(e.to_string()))?
        .into_iter()
        .map(|r| r.map(|r| [r.x, r.y]))
        .collect();
    let projected = kp3d
        .points()
        .iter()
        .map(|x| project(&p, x).ok().map(|uv| [uv.x, uv.y]))
        .collect();
    let (outline, outline_error) = match contained(&state.root, &record.model_path)
        .ok_or_else(|| "model path leaves the dataset root".to_string())
        .and_then(|path| load_mesh(&path).map_err(|e| e.to_string()))
        .and_then(|mesh| {
            render_silhouette(&mesh, &p, image.width as usize, image.height as usize)
                .map_err(|e| e.to_string())
        }) {
        Ok(mask) => (Some(outline(&mask)), None),
        Err(e) => (None, Some(e)),
    };
    Ok(SolveResponse {
        record_id: record.id.clone(),
        record_version: record.version,
        solution,
        recomputed_error: recomputed,
        residuals,
        projected,
        outline,
        outline_error,
    })
}

async fn solve_record(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    body: Result<Json<SolveRequest>, JsonRejection>,
) -> Result<Json<SolveResponse>, ApiError> {
    let Json(req) = body?;
    let record = state.record(&id)?;
    let config = merged_config(&state.config, req.config.as_ref())?;
    let annotations = match req.keypoints_2d {
        Some(a) => a,
        None => {
            let sessions = state.sessions.lock().expect("sessions lock");
            sessions
                .get(&req.session)
                .and_then(|s| s.edits.get(&id).cloned())
                .unwrap_or_else(|| record.keypoint_annotations.clone())
        }
    };
    if annotations.n_keypoints() != record.keypoints_3d.len() {
        return Err(ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            "LengthMismatch",
            format!(
                "{} keypoints given, record has {}",
                annotations.n_keypoints(),
                record.keypoints_3d.len()
            ),
        ));
    }

    let _permit = state
        .solver_slots
        .acquire()
        .await
        .map_err(|e| ApiError::internal(e.to_string()))?;
    let (kp3d, image, method, a) = (
        record.keypoints_3d.clone(),
        record.image_size,
        req.method,
        annotations.clone(),
    );
    let solution = tokio::task::spawn_blocking(move || solve(method, &kp3d, &a, image, &config))
        .await
        .map_err(|e| ApiError::internal(e.to_string()))?
        .map_err(solve_error)?;
    let response = build_response(&state, &record, &annotations, solution.clone())?;

    let mut sessions = state.sessions.lock().expect("sessions lock");
    let session = sessions.entry(req.session).or_default();
    session.edits.insert(id.clone(), annotations.clone());
    session.solutions.insert(
        (id, method),
        Solved {
            solution,
            annotations,
            version: record.version,
        },
    );
    Ok(Json(response))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CommitRequest {
    #[serde(default = "default_session")]
    pub session: String,
    /// Which of the session's solutions to persist.
    #[serde(default = "default_method")]
    pub method: SolveMethod,
    /// Keypoints to store with the pose; defaults to those it was solved from.
    #[serde(default)]
    pub keypoints_2d: Option<AnnotationTriple>,
    /// Record version the edit is based on; defaults to the version current
    /// at solve time.
    #[serde(default)]
    pub base_version: Option<u64>,
}

#[derive(Serialize)]
struct CommitLogLine<'a> {
    unix_time: u64,
    record: &'a str,
    version: u64,
    method: SolveMethod,
    error: f64,
    focal: f64,
}

async fn commit_record(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    body: Result<Json<CommitRequest>, JsonRejection>,
) -> Result<Json<AnnotationRecord>, ApiError> {
    let Json(req) = body?;
    state.record(&id)?;
    let solved = {
        let sessions = state.sessions.lock().expect("sessions lock");
        sessions
            .get(&req.session)
            .and_then(|s| s.solutions.get(&(id.clone(), req.method)).cloned())
    };
    let Some(solved) = solved else {
        return Err(ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            "NoPriorSolve",
            format!(
                "session '{}' has no {:?} solution for '{id}'",
                req.session, req.method
            ),
        ));
    };
    let keypoints = req.keypoints_2d.unwrap_or(solved.annotations);
    let base_version = req.base_version.unwrap_or(solved.version);

    // One commit at a time: check the version, write, then publish.
    let _guard = state.commits.lock().await;
    let mut updated: Vec<AnnotationRecord> = state.records.read().expect("records lock").clone();
    let record = updated
        .iter_mut()
        .find(|r| r.id == id)
        .ok_or_else(|| ApiError::not_found(&id))?;
    if record.version != base_version {
        return Err(ApiError::new(
            StatusCode::CONFLICT,
            "VersionConflict",
            format!(
                "record '{id}' is at version {}, edit is based on {base_version}",
                record.version
            ),
        ));
    }
    if keypoints.n_keypoints() != record.keypoints_3d.len() {
        return Err(ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            "LengthMismatch",
            "keypoint count differs from the record",
        ));
    }
    record.pose = Some(solved.solution.pose);
    record.focal = Some(solved.solution.focal);
    record.keypoint_annotations = keypoints;
    record.version += 1;
    let committed = record.clone();
    save_annotations(&state.root.join(ANNOTATION_FILE), &updated)?;
    *state.records.write().expect("records lock") = updated;

    let line = CommitLogLine {
        unix_time: std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
        record: &id,
        version: committed.version,
        method: req.method,
        error: solved.solution.error,
        focal: solved.solution.focal,
    };
    let log_path = state.root.join(AUDIT_LOG);
    let appended = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .and_then(|mut f| {
            writeln!(
                f,
                "{}",
                serde_json::to_string(&line).expect("log line serializes")
            )
        });
    if let Err(e) = appended {
        log::error!("could not append to {}: {e}", log_path.display());
    }
    Ok(Json(committed))
}
