use std::path::{Component, Path, PathBuf};
use std::sync::Arc;

use axum::body::Body;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{Html, IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::NaiveDate;
use curare_core::active::LoopConfig;
use curare_core::index::FacetFilter;
use serde::Deserialize;
use serde_json::{json, Value};
use tower_http::services::ServeDir;

use crate::error::ApiError;
use crate::session::{LabelEntry, Session};
use crate::AppState;

type Shared = State<Arc<AppState>>;

const PLACEHOLDER: &str = include_str!("../assets/placeholder.html");
const MAX_K: usize = 10_000;

pub fn router(state: Arc<AppState>) -> Router {
    let api = Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}/batch", get(get_batch))
        .route("/sessions/{id}/labels", post(post_labels))
        .route("/sessions/{id}/status", get(get_status))
        .route("/sessions/{id}/curated", get(get_curated))
        .route("/search", get(search))
        .route("/images/{item_id}", get(image));
    let api = match &state.config.ui_dir {
        Some(dir) => {
            api.fallback_service(ServeDir::new(dir).append_index_html_on_directories(true))
        }
        None => api
            .route("/", get(|| async { Html(PLACEHOLDER) }))
            .fallback(|| async { ApiError::NotFound("no such route".into()) }),
    };
    api.with_state(state)
}

/// Applies a JSON object of overrides to `base`. Unknown keys are errors.
pub(crate) fn merge_config(base: &LoopConfig, overrides: &Value) -> Result<LoopConfig, ApiError> {
    fn merge(into: &mut Value, from: &Value, path: &str) -> Result<(), ApiError> {
        let (Value::Object(dst), Value::Object(src)) = (into, from) else {
            return Err(ApiError::BadRequest(format!("{path} must be an object")));
        };
        for (k, v) in src {
            let key = if path.is_empty() {
                k.clone()
            } else {
                format!("{path}.{k}")
            };
            match dst.get_mut(k) {
                None => return Err(ApiError::BadRequest(format!("unknown config key {key:?}"))),
                Some(slot @ Value::Object(_)) => merge(slot, v, &key)?,
                Some(slot) => *slot = v.clone(),
            }
        }
        Ok(())
    }
    let mut cfg = serde_json::to_value(base).map_err(|e| ApiError::Internal(e.to_string()))?;
    if !overrides.is_null() {
        merge(&mut cfg, overrides, "")?;
    }
    let cfg: LoopConfig =
        serde_json::from_value(cfg).map_err(|e| ApiError::BadRequest(format!("config: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateBody {
    starter_id: String,
    #[serde(default)]
    config: Value,
}

async fn create_session(
    State(app): Shared,
    body: Result<Json<CreateBody>, axum::extract::rejection::JsonRejection>,
) -> Result<Response, ApiError> {
    let Json(body) = body.map_err(|e| ApiError::BadRequest(e.body_text()))?;
    let worker = Arc::clone(&app);
    let session =
        tokio::task::spawn_blocking(move || worker.create_session(&body.starter_id, &body.config))
            .await
            .map_err(|e| ApiError::Internal(e.to_string()))??;
    let session = session.lock().unwrap();
    let body = json!({
        "session_id": session.id,
        "share_token": session.share_token,
        "share_path": format!("/#/label/{}/{}", session.id, session.share_token),
    });
    Ok((StatusCode::CREATED, Json(body)).into_response())
}

fn lookup(app: &AppState, id: &str) -> Result<Arc<std::sync::Mutex<Session>>, ApiError> {
    app.session(id)
        .ok_or_else(|| ApiError::NotFound(format!("unknown session {id:?}")))
}

#[derive(Deserialize, Default)]
struct TokenQuery {
    token: Option<String>,
}

/// Accepts `Authorization: Bearer <share_token>` or `?token=`.
fn authorize(session: &Session, headers: &HeaderMap, query: &TokenQuery) -> Result<(), ApiError> {
    let bearer = headers
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "))
        .map(str::trim);
    match bearer.or(query.token.as_deref()) {
        Some(t) if t == session.share_token => Ok(()),
        _ => Err(ApiError::Unauthorized),
    }
}

async fn get_batch(
    State(app): Shared,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<TokenQuery>,
    headers: HeaderMap,
) -> Result<Response, ApiError> {
    let s = lookup(&app, &id)?;
    let s = s.lock().unwrap();
    authorize(&s, &headers, &q)?;
    Ok(match s.batch(app.index.set()) {
        Some(b) => Json(b).into_response(),
        None => StatusCode::NO_CONTENT.into_response(),
    })
}

#[derive(Deserialize)]
struct LabelsBody {
    batch_id: u64,
    labels: Vec<LabelEntry>,
}

async fn post_labels(
    State(app): Shared,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<TokenQuery>,
    headers: HeaderMap,
    body: Result<Json<LabelsBody>, axum::extract::rejection::JsonRejection>,
) -> Result<Response, ApiError> {
    let session = lookup(&app, &id)?;
    let set = app.index.set();
    let (outcome, progress, next) = {
        let mut s = session.lock().unwrap();
        authorize(&s, &headers, &q)?;
        let Json(body) = body.map_err(|e| ApiError::BadRequest(e.body_text()))?;
        let outcome = s.submit(set, body.batch_id, &body.labels)?;
        let next = outcome.completed.then(|| s.begin_training());
        (outcome, s.progress(set.len()), next)
    };
    if let Some(state) = next {
        let app = Arc::clone(&app);
        let session = Arc::clone(&session);
        tokio::task::spawn_blocking(move || {
            let result = crate::session::advance(state, &app.index);
            let mut s = session.lock().unwrap();
            if let Err(e) = s.finish_training(app.index.set(), result) {
                log::error!("session {}: {e}", s.id);
            }
        });
    }
    let status = if outcome.rejected.is_empty() {
        StatusCode::OK
    } else {
        StatusCode::UNPROCESSABLE_ENTITY
    };
    let mut body = json!({
        "accepted": outcome.accepted,
        "batch_complete": outcome.completed,
        "progress": progress,
    });
    if !outcome.rejected.is_empty() {
        body["rejected"] = json!(outcome.rejected);
        body["error"] = json!("items not in the outstanding batch");
    }
    Ok((status, Json(body)).into_response())
}

async fn get_status(
    State(app): Shared,
    UrlPath(id): UrlPath<String>,
) -> Result<Response, ApiError> {
    let s = lookup(&app, &id)?;
    let s = s.lock().unwrap();
    Ok(Json(s.status(app.index.set())).into_response())
}

async fn get_curated(
    State(app): Shared,
    UrlPath(id): UrlPath<String>,
) -> Result<Response, ApiError> {
    let s = lookup(&app, &id)?;
    let s = s.lock().unwrap();
    let items = s.curated(app.index.set());
    Ok(
        Json(json!({ "phase": s.state().phase, "count": items.len(), "items": items }))
            .into_response(),
    )
}

#[derive(Deserialize)]
struct SearchQuery {
    item_id: Option<String>,
    k: Option<String>,
    product: Option<String>,
    date_from: Option<String>,
    date_to: Option<String>,
    resolution_level: Option<String>,
    nprobe: Option<String>,
}

fn parse_param<T: std::str::FromStr>(name: &str, v: Option<&str>) -> Result<Option<T>, ApiError>
where
    T::Err: std::fmt::Display,
{
    v.filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<T>()
                .map_err(|e| ApiError::BadRequest(format!("{name}={s:?}: {e}")))
        })
        .transpose()
}

async fn search(State(app): Shared, Query(q): Query<SearchQuery>) -> Result<Response, ApiError> {
    let item_id = q
        .item_id
        .filter(|s| !s.is_empty())
        .ok_or_else(|| ApiError::BadRequest("item_id is required".into()))?;
    let k = parse_param::<usize>("k", q.k.as_deref())?.unwrap_or(10);
    if k == 0 || k > MAX_K {
        return Err(ApiError::BadRequest(format!("k must be in 1..={MAX_K}")));
    }
    let filter = FacetFilter {
        product: q.product.filter(|s| !s.is_empty()),
        date_from: parse_param::<NaiveDate>("date_from", q.date_from.as_deref())?,
        date_to: parse_param::<NaiveDate>("date_to", q.date_to.as_deref())?,
        resolution_level: parse_param::<u32>("resolution_level", q.resolution_level.as_deref())?,
    };
    if let (Some(a), Some(b)) = (filter.date_from, filter.date_to) {
        if a > b {
            return Err(ApiError::BadRequest("date_from is after date_to".into()));
        }
    }
    let nprobe =
        parse_param::<usize>("nprobe", q.nprobe.as_deref())?.unwrap_or(app.index.default_nprobe());
    if app.index.set().row_of(&item_id).is_none() {
        return Err(ApiError::NotFound(format!("unknown item {item_id:?}")));
    }
    let worker = Arc::clone(&app);
    let hits = tokio::task::spawn_blocking(move || {
        worker.index.query_item(&item_id, k, Some(&filter), nprobe)
    })
    .await
    .map_err(|e| ApiError::Internal(e.to_string()))?
    .map_err(|e| ApiError::BadRequest(e.to_string()))?;
    let set = app.index.set();
    let out: Vec<Value> = hits
        .iter()
        .map(|h| json!({ "item_id": h.item_id, "distance": h.distance, "uri": set.meta(h.row_id).uri }))
        .collect();
    Ok(Json(out).into_response())
}

/// Resolves `uri` under `root`, refusing anything that leaves it.
pub(crate) fn resolve_image(root: &Path, uri: &str) -> Result<PathBuf, ApiError> {
    let rel = Path::new(uri);
    let forbidden = || ApiError::Forbidden(format!("{uri:?} is outside the image root"));
    if uri.is_empty()
        || rel.is_absolute()
        || rel
            .components()
            .any(|c| !matches!(c, Component::Normal(_) | Component::CurDir))
    {
        return Err(forbidden());
    }
    let root = root
        .canonicalize()
        .map_err(|e| ApiError::Internal(format!("image root: {e}")))?;
    match root.join(rel).canonicalize() {
        Ok(p) if p.starts_with(&root) && p.is_file() => Ok(p),
        Ok(p) if !p.starts_with(&root) => Err(forbidden()),
        _ => Err(ApiError::NotFound(format!("no image at {uri:?}"))),
    }
}

fn content_type(path: &Path) -> &'static str {
    match path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .as_deref()
    {
        Some("png") => "image/png",
        Some("jpg" | "jpeg") => "image/jpeg",
        Some("tif" | "tiff") => "image/tiff",
        Some("ppm") => "image/x-portable-pixmap",
        Some("pbm") => "image/x-portable-bitmap",
        Some("webp") => "image/webp",
        _ => "application/octet-stream",
    }
}

async fn image(
    State(app): Shared,
    UrlPath(item_id): UrlPath<String>,
) -> Result<Response, ApiError> {
    let set = app.index.set();
    let row = set
        .row_of(&item_id)
        .ok_or_else(|| ApiError::NotFound(format!("unknown item {item_id:?}")))?;
    let root = app
        .config
        .images_root
        .as_deref()
        .ok_or_else(|| ApiError::NotFound("no image root configured".into()))?;
    let path = resolve_image(root, &set.meta(row).uri)?;
    let bytes = tokio::fs::read(&path).await?;
    Ok((
        [(header::CONTENT_TYPE, content_type(&path))],
        Body::from(bytes),
    )
        .into_response())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_merge_and_reject_unknown_keys() {
        let base = LoopConfig::default();
        let cfg = merge_config(&base, &json!({"seed_nn": 10, "train": {"l2": 0.1}})).unwrap();
        assert_eq!(cfg.seed_nn, 10);
        assert_eq!(cfg.train.l2, 0.1);
        assert_eq!(cfg.seed_random, base.seed_random);
        assert!(merge_config(&base, &json!({"nope": 1})).is_err());
        assert!(merge_config(&base, &json!({"batch_size": 0})).is_err());
        assert!(merge_config(&base, &json!({"batch_size": "x"})).is_err());
        assert_eq!(merge_config(&base, &Value::Null).unwrap(), base);
    }

    #[test]
    fn image_paths_stay_inside_root() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir(dir.path().join("a")).unwrap();
        std::fs::write(dir.path().join("a/x.png"), b"png").unwrap();
        assert!(resolve_image(dir.path(), "a/x.png").is_ok());
        assert!(matches!(
            resolve_image(dir.path(), "../../etc"),
            Err(ApiError::Forbidden(_))
        ));
        assert!(matches!(
            resolve_image(dir.path(), "/etc/passwd"),
            Err(ApiError::Forbidden(_))
        ));
        assert!(matches!(
            resolve_image(dir.path(), "a/missing.png"),
            Err(ApiError::NotFound(_))
        ));
        #[cfg(unix)]
        {
            std::os::unix::fs::symlink("/etc", dir.path().join("a/link")).unwrap();
            assert!(matches!(
                resolve_image(dir.path(), "a/link"),
                Err(ApiError::Forbidden(_))
            ));
        }
    }
}
