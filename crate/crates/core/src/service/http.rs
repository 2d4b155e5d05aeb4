//! HTTP routes. Nothing here maps a URL path onto the vault directory:
//! documents are reachable only as `/documents/{doc_id}`, and only through
//! [`Vault::download`].

use std::future::Future;
use std::io;
use std::sync::Arc;

use axum::body::Body;
use axum::extract::{FromRequest, FromRequestParts, Multipart, Path, Query, Request, State};
use axum::http::request::Parts;
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use futures::TryStreamExt;
use percent_encoding::percent_decode_str;
use serde::{Deserialize, Serialize};
use tokio::net::TcpListener;
use tokio_util::io::StreamReader;

use super::{Vault, VaultError, DEFAULT_PAGE_SIZE};
use crate::access::{authenticate, bearer_credential, Principal};
use crate::delivery::{parse_range_header, Extent};
use crate::metadata::{Cursor, DocId, DocumentRecord};

/// Public view of a record. Deliberately omits the storage name.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocumentView {
    pub doc_id: String,
    pub owner: String,
    pub original_filename: String,
    pub media_type: String,
    pub size_bytes: u64,
    pub upload_timestamp: i64,
}

impl From<&DocumentRecord> for DocumentView {
    fn from(r: &DocumentRecord) -> Self {
        DocumentView {
            doc_id: r.doc_id.to_string(),
            owner: r.owner.clone(),
            original_filename: r.original_filename.clone(),
            media_type: r.media_type.clone(),
            size_bytes: r.size_bytes,
            upload_timestamp: r.upload_timestamp,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ListView {
    pub documents: Vec<DocumentView>,
    pub next_cursor: Option<String>,
}

#[derive(Debug)]
pub enum ApiError {
    Unauthenticated,
    BadRequest(&'static str),
    NotFound,
    TooLarge,
    Conflict,
    RangeNotSatisfiable(u64),
    Internal,
}

#[derive(Serialize)]
struct ErrorBody {
    error: &'static str,
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, message) = match self {
            ApiError::Unauthenticated => (StatusCode::UNAUTHORIZED, "unauthenticated"),
            ApiError::BadRequest(m) => (StatusCode::BAD_REQUEST, m),
            ApiError::NotFound => (StatusCode::NOT_FOUND, "not found"),
            ApiError::TooLarge => (StatusCode::PAYLOAD_TOO_LARGE, "upload too large"),
            ApiError::Conflict => (StatusCode::CONFLICT, "storage name collision, retry later"),
            ApiError::RangeNotSatisfiable(_) => {
                (StatusCode::RANGE_NOT_SATISFIABLE, "range not satisfiable")
            }
            ApiError::Internal => (StatusCode::INTERNAL_SERVER_ERROR, "internal error"),
        };
        let mut resp = (status, Json(ErrorBody { error: message })).into_response();
        match self {
            ApiError::Unauthenticated => {
                resp.headers_mut()
                    .insert(header::WWW_AUTHENTICATE, HeaderValue::from_static("Bearer"));
            }
            ApiError::RangeNotSatisfiable(total) => {
                if let Ok(v) = HeaderValue::from_str(&format!("bytes */{total}")) {
                    resp.headers_mut().insert(header::CONTENT_RANGE, v);
                }
            }
            _ => {}
        }
        resp
    }
}

impl From<VaultError> for ApiError {
    fn from(e: VaultError) -> Self {
        match e {
            VaultError::TooLarge { .. } => ApiError::TooLarge,
            VaultError::DuplicateOpaqueName => ApiError::Conflict,
            VaultError::NotFound => ApiError::NotFound,
            VaultError::RangeNotSatisfiable { total } => ApiError::RangeNotSatisfiable(total),
            VaultError::Invalid(_) => ApiError::BadRequest("invalid request"),
            other => {
                tracing::error!(error = %other, "request failed");
                ApiError::Internal
            }
        }
    }
}

/// An authenticated caller.
pub struct Authenticated(pub Principal);

impl FromRequestParts<Arc<Vault>> for Authenticated {
    type Rejection = ApiError;

    async fn from_request_parts(parts: &mut Parts, vault: &Arc<Vault>) -> Result<Self, ApiError> {
        let credential = parts
            .headers
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(bearer_credential)
            .ok_or(ApiError::Unauthenticated)?;
        authenticate(vault.store(), credential)
            .map(Authenticated)
            .ok_or(ApiError::Unauthenticated)
    }
}

/// True when the path, decoded up to three times, has a `.` or `..`
/// segment, a backslash, or a NUL.
pub fn has_traversal(raw_path: &str) -> bool {
    let mut current = raw_path.to_string();
    for round in 0..=3 {
        let bad = current.contains('\0')
            || current.contains('\\')
            || current.split('/').any(|seg| seg == ".." || seg == ".");
        if bad {
            return true;
        }
        if round == 3 {
            break;
        }
        let decoded = percent_decode_str(&current).decode_utf8_lossy().into_owned();
        if decoded == current {
            break;
        }
        current = decoded;
    }
    false
}

async fn reject_traversal(req: Request, next: Next) -> Response {
    if has_traversal(req.uri().path()) {
        return ApiError::BadRequest("path traversal rejected").into_response();
    }
    next.run(req).await
}

pub fn router(vault: Arc<Vault>) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/documents", get(list).post(upload))
        .route("/documents/{doc_id}", get(download).delete(remove))
        .fallback(not_found)
        .layer(axum::extract::DefaultBodyLimit::disable())
        .layer(middleware::from_fn(reject_traversal))
        .with_state(vault)
}

async fn healthz() -> &'static str {
    "ok"
}

async fn not_found() -> ApiError {
    ApiError::NotFound
}

fn parse_doc_id(raw: &str) -> Result<DocId, ApiError> {
    raw.parse().map_err(|_| ApiError::NotFound)
}

#[derive(Deserialize)]
struct ListQuery {
    cursor: Option<String>,
    limit: Option<usize>,
}

async fn list(
    State(vault): State<Arc<Vault>>,
    Authenticated(principal): Authenticated,
    Query(q): Query<ListQuery>,
) -> Result<Json<ListView>, ApiError> {
    let cursor = q
        .cursor
        .as_deref()
        .map(str::parse::<Cursor>)
        .transpose()
        .map_err(|_| ApiError::BadRequest("malformed cursor"))?;
    let page = vault.list_documents(
        &principal,
        cursor.as_ref(),
        q.limit.unwrap_or(DEFAULT_PAGE_SIZE),
    );
    Ok(Json(ListView {
        documents: page.records.iter().map(DocumentView::from).collect(),
        next_cursor: page.next.map(|c| c.to_string()),
    }))
}

#[derive(Deserialize)]
struct UploadQuery {
    filename: Option<String>,
}

async fn upload(
    State(vault): State<Arc<Vault>>,
    Authenticated(principal): Authenticated,
    Query(q): Query<UploadQuery>,
    req: Request,
) -> Result<(StatusCode, Json<DocumentView>), ApiError> {
    let is_multipart = req
        .headers()
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|ct| ct.to_ascii_lowercase().starts_with("multipart/form-data"));

    let record = if is_multipart {
        let mut multipart = Multipart::from_request(req, &vault)
            .await
            .map_err(|_| ApiError::BadRequest("malformed multipart body"))?;
        loop {
            let field = multipart
                .next_field()
                .await
                .map_err(|_| ApiError::BadRequest("malformed multipart body"))?
                .ok_or(ApiError::BadRequest("no file part"))?;
            let Some(filename) = field.file_name().map(str::to_string).or(q.filename.clone()) else {
                continue;
            };
            let reader = StreamReader::new(field.map_err(io::Error::other));
            break vault.upload(&principal, &filename, reader).await?;
        }
    } else {
        let filename = q
            .filename
            .ok_or(ApiError::BadRequest("filename query parameter required"))?;
        let declared = req
            .headers()
            .get(header::CONTENT_LENGTH)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.parse::<u64>().ok());
        if declared.is_some_and(|len| len > vault.max_upload_bytes()) {
            return Err(ApiError::TooLarge);
        }
        let stream = req.into_body().into_data_stream().map_err(io::Error::other);
        vault.upload(&principal, &filename, StreamReader::new(stream)).await?
    };
    Ok((StatusCode::CREATED, Json(DocumentView::from(&record))))
}

async fn download(
    State(vault): State<Arc<Vault>>,
    Authenticated(principal): Authenticated,
    Path(doc_id): Path<String>,
    headers: HeaderMap,
) -> Result<Response, ApiError> {
    let doc_id = parse_doc_id(&doc_id)?;
    let range = headers
        .get(header::RANGE)
        .and_then(|v| v.to_str().ok())
        .and_then(parse_range_header);
    let result = vault.download(&principal, &doc_id, range).await?;

    let status = match result.extent {
        Extent::Full => StatusCode::OK,
        Extent::Partial { .. } => StatusCode::PARTIAL_CONTENT,
    };
    let mut builder = Response::builder().status(status);
    for (name, value) in result.headers.pairs() {
        builder = builder.header(name, value);
    }
    if let Some(content_range) = result.extent.content_range() {
        builder = builder.header(header::CONTENT_RANGE, content_range);
    }
    builder
        .body(Body::from_stream(result.body))
        .map_err(|_| ApiError::Internal)
}

async fn remove(
    State(vault): State<Arc<Vault>>,
    Authenticated(principal): Authenticated,
    Path(doc_id): Path<String>,
) -> Result<StatusCode, ApiError> {
    let doc_id = parse_doc_id(&doc_id)?;
    vault.delete_document(&principal, &doc_id).await?;
    Ok(StatusCode::NO_CONTENT)
}

/// Serves until `shutdown` resolves, then drains in-flight requests.
pub async fn serve(
    listener: TcpListener,
    vault: Arc<Vault>,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> io::Result<()> {
    axum::serve(listener, router(vault))
        .with_graceful_shutdown(shutdown)
        .await
}
