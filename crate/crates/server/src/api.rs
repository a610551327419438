//! `/v1` HTTP routes.

use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderName, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::Deserialize;
use serde_json::json;

use regmark_core::suggestion::write_trace_csv;
use regmark_core::TransformField;

use crate::error::{ErrorKind, ServiceError};
use crate::images::{load_image, resolve, tile_png, TileRequest};
use crate::maps::{auto_stride, render, MapKind, DEFAULT_MAP_SIDE};
use crate::session::{matrix_rows, AnnotationRequest, CreateSession, SkipRequest};
use crate::store::SessionStore;

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let status = match self.kind {
            ErrorKind::NotFound => StatusCode::NOT_FOUND,
            ErrorKind::Conflict => StatusCode::CONFLICT,
            ErrorKind::Invalid => StatusCode::UNPROCESSABLE_ENTITY,
            ErrorKind::BadRequest => StatusCode::BAD_REQUEST,
            ErrorKind::Internal => StatusCode::INTERNAL_SERVER_ERROR,
        };
        let body = json!({ "error": { "code": self.code, "message": self.message } });
        (status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ServiceError>;

/// Parses a JSON body: syntax errors are 400, well-formed but invalid bodies 422.
fn parse<T: DeserializeOwned>(body: &Bytes) -> ApiResult<T> {
    let text = if body.is_empty() { &b"{}"[..] } else { &body[..] };
    serde_json::from_slice(text).map_err(|e| {
        if e.is_syntax() || e.is_eof() {
            ServiceError::new(ErrorKind::BadRequest, "malformed_json", e.to_string())
        } else {
            ServiceError::invalid("invalid_payload", e.to_string())
        }
    })
}

/// Runs CPU-bound session work off the async executor.
async fn blocking<T, F>(f: F) -> ApiResult<T>
where
    F: FnOnce() -> ApiResult<T> + Send + 'static,
    T: Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ServiceError::internal(format!("worker failed: {e}")))?
}

pub fn router(store: Arc<SessionStore>) -> Router {
    let v1 = Router::new()
        .route("/health", get(|| async { Json(json!({ "status": "ok" })) }))
        .route("/sessions", post(create_session).get(list_sessions))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/suggestion", get(get_suggestion))
        .route("/sessions/{id}/annotations", post(post_annotation).get(list_annotations))
        .route("/sessions/{id}/skip", post(post_skip))
        .route("/sessions/{id}/maps/{kind}", get(get_map))
        .route("/sessions/{id}/trace", get(get_trace))
        .route("/images/{id}/tile", get(get_tile));
    Router::new().nest("/v1", v1).with_state(store)
}

async fn create_session(State(store): State<Arc<SessionStore>>, body: Bytes) -> ApiResult<Response> {
    let request: CreateSession = parse(&body)?;
    let view = blocking(move || store.create(request)).await?;
    Ok((StatusCode::CREATED, Json(view)).into_response())
}

async fn list_sessions(State(store): State<Arc<SessionStore>>) -> ApiResult<Response> {
    Ok(Json(json!({ "sessions": store.ids()? })).into_response())
}

async fn get_session(State(store): State<Arc<SessionStore>>, Path(id): Path<String>) -> ApiResult<Response> {
    Ok(Json(blocking(move || store.view(&id)).await?).into_response())
}

async fn get_suggestion(State(store): State<Arc<SessionStore>>, Path(id): Path<String>) -> ApiResult<Response> {
    Ok(Json(blocking(move || store.suggestion(&id)).await?).into_response())
}

async fn post_annotation(
    State(store): State<Arc<SessionStore>>,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<Response> {
    // unknown sessions are 404 even when the body is bad
    store.get(&id)?;
    let request: AnnotationRequest = parse(&body)?;
    let response = blocking(move || store.annotate(&id, &request)).await?;
    Ok((StatusCode::CREATED, Json(response)).into_response())
}

async fn list_annotations(State(store): State<Arc<SessionStore>>, Path(id): Path<String>) -> ApiResult<Response> {
    let rows = blocking(move || {
        let record = store.get(&id)?;
        let guard = SessionStore::read(&record)?;
        Ok(guard
            .gp
            .annotations()
            .iter()
            .map(|a| json!({ "x": a.x, "y": a.y, "sigma": matrix_rows(&a.sigma) }))
            .collect::<Vec<_>>())
    })
    .await?;
    Ok(Json(json!({ "annotations": rows })).into_response())
}

async fn post_skip(State(store): State<Arc<SessionStore>>, Path(id): Path<String>, body: Bytes) -> ApiResult<Response> {
    store.get(&id)?;
    let request: SkipRequest = parse(&body)?;
    Ok(Json(blocking(move || store.skip(&id, &request)).await?).into_response())
}

#[derive(Debug, Default, Deserialize)]
struct MapQuery {
    /// Displacement field (raw + JSON header) in the data directory.
    transform: Option<String>,
    stride: Option<usize>,
}

async fn get_map(
    State(store): State<Arc<SessionStore>>,
    Path((id, kind)): Path<(String, String)>,
    Query(query): Query<MapQuery>,
) -> ApiResult<Response> {
    let kind: MapKind = kind
        .parse()
        .map_err(|e: anyhow::Error| ServiceError::not_found("map kind", &e.to_string()))?;
    let record = store.get(&id)?;
    let data_dir = store.data_dir().to_path_buf();
    let map = blocking(move || {
        let guard = SessionStore::read(&record)?;
        if guard.fixed.dimension() != 2 {
            return Err(ServiceError::invalid("unsupported_dimension", "maps are rendered for 2-D sessions only"));
        }
        let phi_hat = match (&query.transform, kind) {
            (Some(name), _) => {
                let path = resolve(&data_dir, name).map_err(|e| ServiceError::invalid("invalid_transform", e.to_string()))?;
                let base = path.with_extension("");
                let field = TransformField::read_raw(&base)
                    .map_err(|e| ServiceError::invalid("invalid_transform", e.to_string()))?;
                if field.dimension() != 2 {
                    return Err(ServiceError::invalid("dimension_mismatch", "transform is not 2-D"));
                }
                Some(field)
            }
            (None, MapKind::Entropy) => None,
            (None, _) => {
                return Err(ServiceError::invalid(
                    "missing_transform",
                    format!("the {kind} map needs ?transform=<name>"),
                ))
            }
        };
        let background = match (&guard.request.fixed_image, kind) {
            (Some(name), MapKind::Blended) => {
                let path = resolve(&data_dir, name).map_err(|e| ServiceError::internal(e.to_string()))?;
                Some(load_image(&path).map_err(|e| ServiceError::internal(format!("{e:#}")))?)
            }
            _ => None,
        };
        let stride = match query.stride {
            Some(0) => return Err(ServiceError::invalid("invalid_parameter", "stride must be positive")),
            Some(s) => s,
            None => auto_stride(&guard.fixed, DEFAULT_MAP_SIDE),
        };
        render(kind, &guard.gp, &guard.fixed, stride, phi_hat.as_ref(), background.as_ref())
            .map_err(|e| ServiceError::invalid("map_failed", format!("{e:#}")))
    })
    .await?;
    let headers = [
        (header::CONTENT_TYPE, "image/png".to_string()),
        (HeaderName::from_static("x-map-stride"), map.stride.to_string()),
        (HeaderName::from_static("x-map-min"), map.min.to_string()),
        (HeaderName::from_static("x-map-max"), map.max.to_string()),
    ];
    Ok((headers, map.png).into_response())
}

async fn get_trace(State(store): State<Arc<SessionStore>>, Path(id): Path<String>) -> ApiResult<Response> {
    let out = blocking(move || {
        let record = store.get(&id)?;
        let guard = SessionStore::read(&record)?;
        let mut out = Vec::new();
        write_trace_csv(&mut out, &guard.trace, guard.fixed.dimension())
            .map_err(|e| ServiceError::internal(e.to_string()))?;
        Ok(out)
    })
    .await?;
    Ok(([(header::CONTENT_TYPE, "text/csv")], out).into_response())
}

async fn get_tile(
    State(store): State<Arc<SessionStore>>,
    Path(id): Path<String>,
    Query(tile): Query<TileRequest>,
) -> ApiResult<Response> {
    let data_dir = store.data_dir().to_path_buf();
    let png = blocking(move || {
        let path = resolve(&data_dir, &id).map_err(|_| ServiceError::not_found("image", &id))?;
        if !path.is_file() {
            return Err(ServiceError::not_found("image", &id));
        }
        let image = load_image(&path).map_err(|e| ServiceError::invalid("invalid_image", format!("{e:#}")))?;
        tile_png(&image, &tile).map_err(|e| ServiceError::invalid("invalid_tile", e.to_string()))
    })
    .await?;
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}
