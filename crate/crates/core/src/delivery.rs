//! Mediated delivery of stored blobs.
//!
//! A document is never served as a static file. The application opens the
//! blob, emits `Content-Type`, `Content-Length`, `Accept-Ranges: bytes` and
//! `Content-Disposition: attachment; filename="..."`, then streams the
//! content in fixed-size chunks.

use std::io;
use std::path::{Path, PathBuf};
use std::pin::Pin;
use std::task::{Context, Poll};

use bytes::Bytes;
use futures::Stream;
use percent_encoding::{utf8_percent_encode, NON_ALPHANUMERIC};
use tokio::io::{AsyncRead, AsyncSeekExt, ReadBuf};

use crate::access::{Action, Grant};
use crate::metadata::DocumentRecord;
use crate::naming::OpaqueName;

pub const DEFAULT_CHUNK_SIZE: usize = 64 * 1024;
pub const OCTET_STREAM: &str = "application/octet-stream";

#[derive(Debug, thiserror::Error)]
pub enum DeliveryError {
    #[error("blob for document is missing")]
    BlobMissing,
    #[error("blob size differs from its record")]
    SizeMismatch,
    #[error("requested range not satisfiable")]
    RangeNotSatisfiable { total: u64 },
    #[error("grant does not cover this document")]
    NotAuthorized,
    #[error("path escapes the vault directory")]
    Confinement,
    #[error("i/o failure: {0}")]
    Io(#[from] io::Error),
}

/// The vault directory, as seen by code that touches blobs. Every blob path
/// is built here and checked to be a direct child of the root.
#[derive(Clone, Debug)]
pub struct BlobDir {
    root: PathBuf,
}

impl BlobDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        BlobDir { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn blob_path(&self, name: &OpaqueName) -> Result<PathBuf, DeliveryError> {
        let rendered = name.to_string();
        let path = self.root.join(&rendered);
        if path.parent() != Some(self.root.as_path())
            || path.file_name().and_then(|n| n.to_str()) != Some(rendered.as_str())
        {
            return Err(DeliveryError::Confinement);
        }
        Ok(path)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DeliveryHeaders {
    pub content_type: String,
    pub content_length: u64,
    pub accept_ranges: &'static str,
    pub content_disposition: String,
}

impl DeliveryHeaders {
    /// Header name/value pairs in emission order.
    pub fn pairs(&self) -> [(&'static str, String); 4] {
        [
            ("Content-Type", self.content_type.clone()),
            ("Content-Length", self.content_length.to_string()),
            ("Accept-Ranges", self.accept_ranges.to_string()),
            ("Content-Disposition", self.content_disposition.clone()),
        ]
    }
}

/// Strips characters that could break out of the quoted `filename`
/// parameter or name a path. Non-ASCII is replaced by `_`.
pub fn sanitize_filename(name: &str) -> String {
    let cleaned: String = name
        .chars()
        .filter(|c| !matches!(c, '"' | '\r' | '\n' | '/' | '\\') && !c.is_control())
        .map(|c| if c.is_ascii() { c } else { '_' })
        .collect();
    let trimmed = cleaned.trim();
    if trimmed.is_empty() || trimmed.chars().all(|c| c == '.') {
        "download".to_string()
    } else {
        trimmed.to_string()
    }
}

fn content_disposition(download_name: &str) -> String {
    let ascii = sanitize_filename(download_name);
    let mut value = format!("attachment; filename=\"{ascii}\"");
    if !download_name.is_ascii() {
        let utf8: String = download_name
            .chars()
            .filter(|c| !matches!(c, '"' | '/' | '\\') && !c.is_control())
            .collect();
        value.push_str("; filename*=UTF-8''");
        value.push_str(&utf8_percent_encode(&utf8, NON_ALPHANUMERIC).to_string());
    }
    value
}

pub fn build_headers(record: &DocumentRecord, download_name: &str) -> DeliveryHeaders {
    DeliveryHeaders {
        content_type: record.media_type.clone(),
        content_length: record.size_bytes,
        accept_ranges: "bytes",
        content_disposition: content_disposition(download_name),
    }
}

/// A single byte range as requested, before resolving against a length.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RangeSpec {
    /// `first-` or `first-last` (inclusive).
    FromTo { first: u64, last: Option<u64> },
    /// `-n`: the final n octets.
    Suffix(u64),
}

/// Parses a `Range` header. Returns `None` for anything other than a single
/// well-formed byte range, which callers answer with the full file.
pub fn parse_range_header(value: &str) -> Option<RangeSpec> {
    let spec = value.trim().strip_prefix("bytes=")?.trim();
    if spec.contains(',') {
        return None;
    }
    let (first, last) = spec.split_once('-')?;
    let (first, last) = (first.trim(), last.trim());
    if first.is_empty() {
        return last.parse().ok().map(RangeSpec::Suffix);
    }
    let first: u64 = first.parse().ok()?;
    let last = if last.is_empty() {
        None
    } else {
        let last: u64 = last.parse().ok()?;
        if last < first {
            return None;
        }
        Some(last)
    };
    Some(RangeSpec::FromTo { first, last })
}

impl RangeSpec {
    /// Resolves to an inclusive `(start, end)` within `total` octets.
    pub fn resolve(self, total: u64) -> Result<(u64, u64), DeliveryError> {
        let unsatisfiable = DeliveryError::RangeNotSatisfiable { total };
        match self {
            RangeSpec::FromTo { first, last } => {
                if first >= total {
                    return Err(unsatisfiable);
                }
                let end = last.map_or(total - 1, |l| l.min(total - 1));
                Ok((first, end))
            }
            RangeSpec::Suffix(n) => {
                if n == 0 || total == 0 {
                    return Err(unsatisfiable);
                }
                Ok((total.saturating_sub(n), total - 1))
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Extent {
    Full,
    Partial { start: u64, end: u64, total: u64 },
}

impl Extent {
    pub fn content_range(&self) -> Option<String> {
        match self {
            Extent::Full => None,
            Extent::Partial { start, end, total } => Some(format!("bytes {start}-{end}/{total}")),
        }
    }
}

pub struct StreamResult {
    pub headers: DeliveryHeaders,
    pub extent: Extent,
    pub body: BlobStream,
}

/// Opens the blob for `record` and prepares a stream of the requested
/// extent. Requires a read grant for this exact record.
pub async fn stream_document(
    blobs: &BlobDir,
    record: &DocumentRecord,
    grant: &Grant,
    range: Option<RangeSpec>,
    chunk_size: usize,
) -> Result<StreamResult, DeliveryError> {
    if !grant.covers(record, Action::Read) {
        return Err(DeliveryError::NotAuthorized);
    }
    let path = blobs.blob_path(&record.opaque_name)?;
    let mut file = match tokio::fs::File::open(&path).await {
        Ok(f) => f,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Err(DeliveryError::BlobMissing),
        Err(e) => return Err(e.into()),
    };
    let total = file.metadata().await?.len();
    if total != record.size_bytes {
        return Err(DeliveryError::SizeMismatch);
    }
    let mut headers = build_headers(record, &record.original_filename);
    let (extent, len) = match range {
        None => (Extent::Full, total),
        Some(spec) => {
            let (start, end) = spec.resolve(total)?;
            if start > 0 {
                file.seek(io::SeekFrom::Start(start)).await?;
            }
            (Extent::Partial { start, end, total }, end - start + 1)
        }
    };
    headers.content_length = len;
    Ok(StreamResult {
        headers,
        extent,
        body: BlobStream::new(file, len, chunk_size),
    })
}

/// Yields exactly `remaining` octets from a reader in chunks of at most
/// `chunk_size`. Ending early is an `UnexpectedEof` error.
pub struct BlobStream {
    reader: Pin<Box<dyn AsyncRead + Send>>,
    remaining: u64,
    buf: Vec<u8>,
}

impl BlobStream {
    pub fn new(reader: impl AsyncRead + Send + 'static, len: u64, chunk_size: usize) -> Self {
        assert!(chunk_size > 0, "chunk size must be positive");
        BlobStream {
            reader: Box::pin(reader),
            remaining: len,
            buf: vec![0; chunk_size],
        }
    }

    pub fn chunk_size(&self) -> usize {
        self.buf.len()
    }

    pub fn remaining(&self) -> u64 {
        self.remaining
    }
}

impl Stream for BlobStream {
    type Item = io::Result<Bytes>;

    fn poll_next(self: Pin<&mut Self>, cx: &mut Context<'_>) -> Poll<Option<Self::Item>> {
        let this = self.get_mut();
        if this.remaining == 0 {
            return Poll::Ready(None);
        }
        let want = this.buf.len().min(usize::try_from(this.remaining).unwrap_or(usize::MAX));
        let mut read_buf = ReadBuf::new(&mut this.buf[..want]);
        match this.reader.as_mut().poll_read(cx, &mut read_buf) {
            Poll::Pending => Poll::Pending,
            Poll::Ready(Err(e)) => {
                this.remaining = 0;
                Poll::Ready(Some(Err(e)))
            }
            Poll::Ready(Ok(())) => {
                let n = read_buf.filled().len();
                if n == 0 {
                    this.remaining = 0;
                    return Poll::Ready(Some(Err(io::Error::new(
                        io::ErrorKind::UnexpectedEof,
                        "blob shorter than announced length",
                    ))));
                }
                this.remaining -= n as u64;
                Poll::Ready(Some(Ok(Bytes::copy_from_slice(&this.buf[..n]))))
            }
        }
    }
}

const EXTENSION_TYPES: &[(&str, &str)] = &[
    ("pdf", "application/pdf"),
    ("txt", "text/plain"),
    ("text", "text/plain"),
    ("csv", "text/csv"),
    ("md", "text/markdown"),
    ("html", "text/html"),
    ("htm", "text/html"),
    ("json", "application/json"),
    ("xml", "application/xml"),
    ("png", "image/png"),
    ("jpg", "image/jpeg"),
    ("jpeg", "image/jpeg"),
    ("gif", "image/gif"),
    ("zip", "application/zip"),
    ("gz", "application/gzip"),
    ("doc", "application/msword"),
    ("docx", "application/vnd.openxmlformats-officedocument.wordprocessingml.document"),
    ("xls", "application/vnd.ms-excel"),
    ("xlsx", "application/vnd.openxmlformats-officedocument.spreadsheetml.sheet"),
    ("ppt", "application/vnd.ms-powerpoint"),
    ("pptx", "application/vnd.openxmlformats-officedocument.presentationml.presentation"),
    ("odt", "application/vnd.oasis.opendocument.text"),
    ("rtf", "application/rtf"),
];

fn sniff(head: &[u8]) -> Option<&'static str> {
    if head.starts_with(b"%PDF-") {
        Some("application/pdf")
    } else if head.starts_with(b"\x89PNG\r\n\x1a\n") {
        Some("image/png")
    } else if head.starts_with(&[0xFF, 0xD8, 0xFF]) {
        Some("image/jpeg")
    } else if head.starts_with(b"PK\x03\x04") || head.starts_with(b"PK\x05\x06") {
        Some("application/zip")
    } else if !head.is_empty()
        && std::str::from_utf8(head).is_ok_and(|s| {
            s.chars().all(|c| !c.is_control() || c.is_ascii_whitespace())
        })
    {
        Some("text/plain")
    } else {
        None
    }
}

/// Media type from the filename extension, else from magic bytes in `head`
/// (at most the first 512 octets are examined), else octet-stream.
pub fn detect_media_type(original_filename: &str, head: &[u8]) -> String {
    let by_ext = original_filename
        .rsplit_once('.')
        .map(|(_, ext)| ext.to_ascii_lowercase())
        .and_then(|ext| {
            EXTENSION_TYPES
                .iter()
                .find(|(e, _)| *e == ext)
                .map(|(_, t)| *t)
        });
    let head = &head[..head.len().min(512)];
    by_ext
        .or_else(|| sniff(head))
        .unwrap_or(OCTET_STREAM)
        .to_string()
}
