use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Redirect, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use loopweaver::hcloop::{RetrainPlan, SongId, SongKind};
use loopweaver::spectral::{self, SongRecipe};
use loopweaver::store::{self, render_table, snapshot_metrics, SongMetrics, VersionMetrics};
use loopweaver::Error as CoreError;
use serde::{Deserialize, Serialize};
use tower_http::services::ServeDir;

use crate::error::{ApiError, ApiResult};
use crate::state::{AppState, RetrainState};

pub fn router(state: AppState) -> Router {
    let mut app = Router::new()
        .route("/", get(index))
        .route("/songs", get(list_songs).post(upload_song))
        .route("/songs/:id/spectrogram", get(spectrogram))
        .route("/songs/:id/audio", get(audio))
        .route("/songs/:id/rating", post(rate_song))
        .route("/sessions", post(create_session))
        .route("/sessions/:token/generate", post(generate))
        .route("/sessions/:token/close", post(close_session))
        .route("/metrics/versions", get(metrics))
        .route("/admin/retrain", get(retrain_status).post(retrain));
    if let Some(dir) = &state.config().static_dir {
        app = app.nest_service("/ui", ServeDir::new(dir).append_index_html_on_directories(true));
    }
    app.with_state(state)
}

enum Caller {
    User(String),
    Admin,
}

fn bearer(headers: &HeaderMap) -> Option<&str> {
    headers
        .get(header::AUTHORIZATION)?
        .to_str()
        .ok()?
        .strip_prefix("Bearer ")
        .map(str::trim)
}

fn caller(state: &AppState, headers: &HeaderMap) -> ApiResult<Caller> {
    let key = bearer(headers).ok_or_else(ApiError::unauthorized)?;
    if let Some(user) = state.user_for_key(key) {
        return Ok(Caller::User(user.to_string()));
    }
    if state.is_admin_key(key) {
        return Ok(Caller::Admin);
    }
    Err(ApiError::unauthorized())
}

fn user(state: &AppState, headers: &HeaderMap) -> ApiResult<String> {
    match caller(state, headers)? {
        Caller::User(u) => Ok(u),
        Caller::Admin => Err(ApiError::forbidden("admin keys cannot act as a listener")),
    }
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::internal(format!("worker failed: {e}")))?
}

async fn index(State(state): State<AppState>) -> Response {
    if state.config().static_dir.is_some() {
        return Redirect::temporary("/ui/").into_response();
    }
    Json(serde_json::json!({
        "service": "loopweaver",
        "endpoints": [
            "GET /songs", "POST /songs", "GET /songs/{id}/spectrogram", "GET /songs/{id}/audio",
            "POST /songs/{id}/rating", "POST /sessions", "POST /sessions/{token}/generate",
            "POST /sessions/{token}/close", "GET /metrics/versions", "POST /admin/retrain"
        ]
    }))
    .into_response()
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct SongSummary {
    pub song_id: SongId,
    pub genre_id: Option<u32>,
    pub spectrogram_url: String,
    pub audio_url: String,
}

fn summary(song_id: SongId, genre_id: Option<u32>) -> SongSummary {
    SongSummary {
        song_id,
        genre_id,
        spectrogram_url: format!("/songs/{song_id}/spectrogram"),
        audio_url: format!("/songs/{song_id}/audio"),
    }
}

/// The input library. Served songs are not listed.
async fn list_songs(State(state): State<AppState>) -> Json<Vec<SongSummary>> {
    let engine = state.engine();
    let mut songs: Vec<SongSummary> = engine
        .songs()
        .filter(|s| s.kind == SongKind::UserInput)
        .map(|s| summary(s.id, s.genre_id))
        .collect();
    songs.sort_by_key(|s| s.song_id);
    Json(songs)
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecipeUpload {
    recipe: SongRecipe,
    #[serde(default)]
    seed: u64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Created {
    pub song_id: SongId,
}

async fn upload_song(State(state): State<AppState>, headers: HeaderMap, body: Bytes) -> ApiResult<Response> {
    user(&state, &headers)?;
    let ctype = headers
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .unwrap_or("")
        .split(';')
        .next()
        .unwrap_or("")
        .trim()
        .to_ascii_lowercase();
    let cfg = *state.engine().spec_config();
    let (clip, genre) = match ctype.as_str() {
        "audio/wav" | "audio/x-wav" | "audio/wave" => {
            let clip = spectral::read_wav(std::io::Cursor::new(&body[..]))?;
            if clip.sample_rate() != cfg.sample_rate {
                return Err(ApiError::new(
                    StatusCode::UNPROCESSABLE_ENTITY,
                    format!("sample rate {} Hz, expected {} Hz", clip.sample_rate(), cfg.sample_rate),
                ));
            }
            (clip, None)
        }
        "application/json" => {
            let up: RecipeUpload = serde_json::from_slice(&body)
                .map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, format!("recipe: {e}")))?;
            let clip = spectral::synth_clip(&up.recipe, cfg.clip_duration(), cfg.sample_rate, up.seed)?;
            (clip, Some(up.recipe.genre_id))
        }
        other => {
            return Err(ApiError::new(
                StatusCode::UNSUPPORTED_MEDIA_TYPE,
                format!("content type {other:?}; send audio/wav or a JSON recipe"),
            ))
        }
    };
    let song_id = blocking(move || {
        let spec = spectral::stft_magnitude(&clip, &cfg)?;
        let wav = spectral::wav_bytes(&clip)?;
        let id = {
            let mut engine = state.engine();
            let id = engine.add_song(spec, genre)?;
            state.persist(&engine)?;
            id
        };
        state.attach_audio(id, &wav)?;
        Ok(id)
    })
    .await?;
    Ok((StatusCode::CREATED, Json(Created { song_id })).into_response())
}

async fn spectrogram(State(state): State<AppState>, Path(id): Path<SongId>) -> ApiResult<Response> {
    let spec = state
        .engine()
        .song(id)
        .map(|s| s.spec.clone())
        .ok_or_else(|| ApiError::not_found(format!("song {id}")))?;
    let bytes = store::encode_spectrogram(&spec);
    Ok(([(header::CONTENT_TYPE, "application/octet-stream")], bytes).into_response())
}

async fn audio(State(state): State<AppState>, Path(id): Path<SongId>) -> ApiResult<Response> {
    let spec = state
        .engine()
        .song(id)
        .map(|s| s.spec.clone())
        .ok_or_else(|| ApiError::not_found(format!("song {id}")))?;
    let iterations = state.config().griffin_lim_iterations;
    let wav = match state.stored_audio(id) {
        Some(w) => w,
        None => blocking(move || Ok(spectral::wav_bytes(&spectral::griffin_lim(&spec, iterations)?)?)).await?,
    };
    Ok(([(header::CONTENT_TYPE, "audio/wav")], wav).into_response())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct NewSession {
    user: String,
    input_song_ids: Vec<SongId>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SessionCreated {
    pub session_token: String,
    pub nearest_baseline_known: bool,
}

async fn create_session(
    State(state): State<AppState>,
    headers: HeaderMap,
    Json(req): Json<NewSession>,
) -> ApiResult<Json<SessionCreated>> {
    let me = user(&state, &headers)?;
    if req.user != me {
        return Err(ApiError::forbidden("user does not match the bearer key"));
    }
    let st = state.clone();
    let (id, known) = blocking(move || {
        st.sweep_expired()?;
        let mut engine = st.engine();
        let id = engine.start_session(&req.user, &req.input_song_ids)?;
        let known = engine.session(id).is_some_and(|s| s.nearest_baseline.is_some());
        Ok((id, known))
    })
    .await?;
    Ok(Json(SessionCreated {
        session_token: state.issue_token(id, &me),
        nearest_baseline_known: known,
    }))
}

/// Identical for both dispatch branches.
#[derive(Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct Generated {
    pub song_id: SongId,
    pub spectrogram_url: String,
    pub audio_url: String,
    pub duration: f64,
}

async fn generate(
    State(state): State<AppState>,
    headers: HeaderMap,
    Path(token): Path<String>,
) -> ApiResult<Json<Generated>> {
    let me = user(&state, &headers)?;
    let session = state.session_for(&token, &me)?;
    let served = blocking(move || {
        let mut engine = state.engine();
        let served = engine.generate(session)?;
        state.persist(&engine)?;
        Ok(served)
    })
    .await?;
    let s = summary(served.song_id, None);
    Ok(Json(Generated {
        song_id: served.song_id,
        spectrogram_url: s.spectrogram_url,
        audio_url: s.audio_url,
        duration: served.duration_seconds,
    }))
}

async fn close_session(
    State(state): State<AppState>,
    headers: HeaderMap,
    Path(token): Path<String>,
) -> ApiResult<Json<serde_json::Value>> {
    let me = user(&state, &headers)?;
    let session = state.session_for(&token, &me)?;
    state.drop_token(&token);
    blocking(move || state.close_sessions(&[session])).await?;
    Ok(Json(serde_json::json!({ "closed": true })))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RatingBody {
    stars: f64,
    listen_seconds: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RatingAccepted {
    pub accepted: bool,
    pub consensus_count: usize,
}

async fn rate_song(
    State(state): State<AppState>,
    headers: HeaderMap,
    Path(id): Path<SongId>,
    Json(body): Json<RatingBody>,
) -> ApiResult<Json<RatingAccepted>> {
    let me = user(&state, &headers)?;
    let key = headers
        .get("idempotency-key")
        .and_then(|v| v.to_str().ok())
        .map(str::to_string);
    let now = state.now();
    let outcome = blocking(move || {
        let mut engine = state.engine();
        let Some(session) = engine.serving_session(id) else {
            if engine.has_rated(id, &me) {
                return Err(CoreError::DuplicateRating { song_id: id, user: me }.into());
            }
            return Err(ApiError::forbidden(format!("song {id} was not served to you")));
        };
        let record = loopweaver::hcloop::RatingRecord::new(
            id,
            &me,
            body.stars,
            body.listen_seconds,
            engine.clip_duration(),
            now,
        )?;
        let outcome = engine.rate(session, record, key)?;
        if !outcome.replayed {
            let entry = engine.ratings().last().expect("rating just accepted").clone();
            state.append_rating(&entry)?;
        }
        Ok(outcome)
    })
    .await?;
    Ok(Json(RatingAccepted {
        accepted: true,
        consensus_count: outcome.consensus_count,
    }))
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct VersionReport {
    pub version: String,
    pub rows: Vec<SongMetrics>,
    /// Absent until the version has ratings.
    pub overall_mean: Option<f64>,
    pub total_count: usize,
    pub created_at: u64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct MetricsReport {
    pub versions: Vec<VersionReport>,
}

#[derive(Debug, Deserialize)]
struct MetricsQuery {
    format: Option<String>,
}

async fn metrics(State(state): State<AppState>, Query(q): Query<MetricsQuery>) -> ApiResult<Response> {
    let snapshots: Vec<(String, u64, Option<VersionMetrics>)> = {
        let engine = state.engine();
        engine
            .versions()
            .iter()
            .map(|v| match snapshot_metrics(engine.ratings(), v.index, v.created_at) {
                Ok(m) => Ok((v.tag(), v.created_at, Some(m))),
                Err(CoreError::EmptyInput(_)) => Ok((v.tag(), v.created_at, None)),
                Err(e) => Err(e),
            })
            .collect::<Result<_, _>>()?
    };
    if q.format.as_deref() == Some("text") {
        let present: Vec<VersionMetrics> = snapshots.iter().filter_map(|(_, _, m)| m.clone()).collect();
        return Ok((
            [(header::CONTENT_TYPE, "text/plain; charset=utf-8")],
            render_table(&present),
        )
            .into_response());
    }
    let versions = snapshots
        .into_iter()
        .map(|(version, created_at, m)| match m {
            Some(m) => VersionReport {
                version,
                overall_mean: Some(m.overall_mean),
                total_count: m.total_count,
                rows: m.rows,
                created_at,
            },
            None => VersionReport {
                version,
                rows: Vec::new(),
                overall_mean: None,
                total_count: 0,
                created_at,
            },
        })
        .collect();
    Ok(Json(MetricsReport { versions }).into_response())
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RetrainBody {
    #[serde(default, alias = "K")]
    k: Option<usize>,
}

fn admin(state: &AppState, headers: &HeaderMap) -> ApiResult<()> {
    match caller(state, headers)? {
        Caller::Admin => Ok(()),
        Caller::User(_) => Err(ApiError::forbidden("admin key required")),
    }
}

async fn retrain_status(State(state): State<AppState>, headers: HeaderMap) -> ApiResult<Json<RetrainState>> {
    admin(&state, &headers)?;
    Ok(Json(state.retrain_state()))
}

async fn retrain(State(state): State<AppState>, headers: HeaderMap, body: Bytes) -> ApiResult<Response> {
    admin(&state, &headers)?;
    let req: RetrainBody = if body.is_empty() {
        RetrainBody::default()
    } else {
        serde_json::from_slice(&body).map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()))?
    };
    let st = state.clone();
    let plan = blocking(move || {
        st.sweep_expired()?;
        let mut slot = st.retrain_slot();
        if matches!(*slot, RetrainState::Running { .. }) {
            return Err(ApiError::new(StatusCode::LOCKED, "a retrain is already running"));
        }
        let plan = {
            let mut engine = st.engine();
            let plan = engine.prepare_retrain(req.k)?;
            st.persist(&engine)?;
            plan
        };
        if let RetrainPlan::Ready(job) = &plan {
            *slot = RetrainState::Running {
                parent_version: job.parent_version,
                targets: job.selected.len(),
            };
        }
        Ok(plan)
    })
    .await?;
    match plan {
        RetrainPlan::Deferred {
            available,
            required,
            removed,
        } => Ok(Json(serde_json::json!({
            "status": "deferred",
            "available": available,
            "required": required,
            "removed": removed.len(),
        }))
        .into_response()),
        RetrainPlan::Ready(job) => {
            let body = serde_json::json!({
                "status": "running",
                "parent_version": job.parent_version,
                "targets": job.selected.len(),
            });
            tokio::task::spawn_blocking(move || {
                let result = job.run().map_err(ApiError::from).and_then(|d| {
                    let mut engine = state.engine();
                    let v = engine.publish(&job, d)?;
                    state.persist(&engine)?;
                    Ok(v)
                });
                *state.retrain_slot() = match result {
                    Ok(version) => {
                        log::info!("published v{version}");
                        RetrainState::Published { version }
                    }
                    Err(e) => {
                        log::error!("retrain failed: {}", e.message);
                        RetrainState::Failed { message: e.message }
                    }
                };
            });
            Ok((StatusCode::ACCEPTED, Json(body)).into_response())
        }
    }
}
