#![allow(dead_code)]

//! Shared fixtures: an MD5 oracle, a static file server standing in for a
//! conventional web server, a running vault service and a raw HTTP client.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::{SocketAddr, TcpStream};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::extract::{Request, State};
use axum::http::{header, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::Router;
use docvault::access::{issue_token, Principal, Role};
use docvault::metadata::MetadataStore;
use docvault::naming::{KeySource, SecretKey};
use docvault::placement::{materialize_layout, plan_layout, PlacementPolicy, VaultLayout};
use docvault::service::{http, Clock, Vault};
use tokio::sync::oneshot;

// ---------------------------------------------------------------------------
// MD5 (RFC 1321), written from the RFC independently of the `md-5` crate.

pub fn md5_oracle(message: &[u8]) -> String {
    const S: [u32; 64] = [
        7, 12, 17, 22, 7, 12, 17, 22, 7, 12, 17, 22, 7, 12, 17, 22, 5, 9, 14, 20, 5, 9, 14, 20, 5,
        9, 14, 20, 5, 9, 14, 20, 4, 11, 16, 23, 4, 11, 16, 23, 4, 11, 16, 23, 4, 11, 16, 23, 6, 10,
        15, 21, 6, 10, 15, 21, 6, 10, 15, 21, 6, 10, 15, 21,
    ];
    let k: Vec<u32> = (0..64)
        .map(|i| ((i as f64 + 1.0).sin().abs() * 4294967296.0) as u32)
        .collect();
    let mut state: [u32; 4] = [0x67452301, 0xefcdab89, 0x98badcfe, 0x10325476];

    let mut data = message.to_vec();
    let bit_len = (message.len() as u64).wrapping_mul(8);
    data.push(0x80);
    while data.len() % 64 != 56 {
        data.push(0);
    }
    data.extend_from_slice(&bit_len.to_le_bytes());

    for block in data.chunks(64) {
        let m: Vec<u32> = block
            .chunks(4)
            .map(|w| u32::from_le_bytes([w[0], w[1], w[2], w[3]]))
            .collect();
        let [mut a, mut b, mut c, mut d] = state;
        for i in 0..64 {
            let (f, g) = match i / 16 {
                0 => ((b & c) | (!b & d), i),
                1 => ((d & b) | (!d & c), (5 * i + 1) % 16),
                2 => (b ^ c ^ d, (3 * i + 5) % 16),
                _ => (c ^ (b | !d), (7 * i) % 16),
            };
            let rotated = a
                .wrapping_add(f)
                .wrapping_add(k[i])
                .wrapping_add(m[g])
                .rotate_left(S[i]);
            a = d;
            d = c;
            c = b;
            b = b.wrapping_add(rotated);
        }
        state[0] = state[0].wrapping_add(a);
        state[1] = state[1].wrapping_add(b);
        state[2] = state[2].wrapping_add(c);
        state[3] = state[3].wrapping_add(d);
    }
    state
        .iter()
        .flat_map(|w| w.to_le_bytes())
        .map(|b| format!("{b:02x}"))
        .collect()
}

// ---------------------------------------------------------------------------
// Static file server fixture: a stand-in for a web server publishing a
// document root, with optional auto-index and `.htaccess` deny support.

#[derive(Clone, Copy, Debug)]
pub struct StaticOptions {
    pub autoindex: bool,
    pub honor_htaccess: bool,
}

#[derive(Clone)]
struct StaticState {
    root: PathBuf,
    options: StaticOptions,
    log: Arc<Mutex<Vec<(Method, String, Instant)>>>,
}

pub struct StaticServer {
    pub addr: SocketAddr,
    pub log: Arc<Mutex<Vec<(Method, String, Instant)>>>,
    shutdown: Option<oneshot::Sender<()>>,
}

impl StaticServer {
    pub fn url(&self, path: &str) -> String {
        format!("http://{}{}", self.addr, path)
    }

    pub fn methods(&self) -> Vec<Method> {
        self.log.lock().unwrap().iter().map(|(m, _, _)| m.clone()).collect()
    }

    pub fn request_count(&self) -> usize {
        self.log.lock().unwrap().len()
    }

    pub fn paths(&self) -> Vec<String> {
        self.log.lock().unwrap().iter().map(|(_, p, _)| p.clone()).collect()
    }

    /// Gaps between consecutive request arrivals.
    pub fn gaps(&self) -> Vec<Duration> {
        let log = self.log.lock().unwrap();
        log.windows(2).map(|w| w[1].2 - w[0].2).collect()
    }
}

impl Drop for StaticServer {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
    }
}

fn denied_by_htaccess(root: &Path, target: &Path) -> bool {
    let mut dir = if target.is_dir() {
        Some(target)
    } else {
        target.parent()
    };
    while let Some(d) = dir {
        if let Ok(text) = std::fs::read_to_string(d.join(".htaccess")) {
            if text.lines().any(|l| l.trim().eq_ignore_ascii_case("deny from all")) {
                return true;
            }
        }
        if d == root {
            break;
        }
        dir = d.parent();
    }
    false
}

fn fixture_content_type(path: &Path) -> &'static str {
    match path.extension().and_then(|e| e.to_str()) {
        Some("html") | Some("htm") => "text/html; charset=utf-8",
        Some("pdf") => "application/pdf",
        Some("txt") => "text/plain",
        _ => "application/octet-stream",
    }
}

fn listing(url_path: &str, dir: &Path) -> String {
    let mut names: Vec<String> = std::fs::read_dir(dir)
        .unwrap()
        .filter_map(|e| e.ok())
        .map(|e| {
            let mut n = e.file_name().to_string_lossy().into_owned();
            if e.path().is_dir() {
                n.push('/');
            }
            n
        })
        .filter(|n| !n.starts_with('.'))
        .collect();
    names.sort();
    let mut html = format!(
        "<!DOCTYPE html>\n<html><head><title>Index of {url_path}</title></head><body>\n<h1>Index of {url_path}</h1>\n<a href=\"?C=N;O=D\">Name</a>\n<a href=\"../\">Parent Directory</a>\n"
    );
    for n in names {
        html.push_str(&format!("<a href=\"{n}\">{n}</a>\n"));
    }
    html.push_str("</body></html>\n");
    html
}

async fn static_handler(State(state): State<StaticState>, req: Request) -> Response {
    state
        .log
        .lock()
        .unwrap()
        .push((req.method().clone(), req.uri().path().to_string(), Instant::now()));
    if req.method() != Method::GET && req.method() != Method::HEAD {
        return StatusCode::METHOD_NOT_ALLOWED.into_response();
    }
    let url_path = req.uri().path().to_string();
    let decoded = percent_encoding::percent_decode_str(&url_path)
        .decode_utf8_lossy()
        .into_owned();
    if decoded.split('/').any(|s| s == "..") {
        return StatusCode::BAD_REQUEST.into_response();
    }
    let target = state.root.join(decoded.trim_start_matches('/'));
    if !target.exists() {
        return StatusCode::NOT_FOUND.into_response();
    }
    if state.options.honor_htaccess && denied_by_htaccess(&state.root, &target) {
        return (StatusCode::FORBIDDEN, "<html><body>Forbidden</body></html>").into_response();
    }
    if target.is_dir() {
        let index = target.join("index.html");
        if index.is_file() {
            let body = std::fs::read(index).unwrap();
            return ([(header::CONTENT_TYPE, "text/html; charset=utf-8")], body).into_response();
        }
        if state.options.autoindex {
            return (
                [(header::CONTENT_TYPE, "text/html; charset=utf-8")],
                listing(&url_path, &target),
            )
                .into_response();
        }
        return StatusCode::FORBIDDEN.into_response();
    }
    let body = std::fs::read(&target).unwrap();
    Response::builder()
        .header(header::CONTENT_TYPE, fixture_content_type(&target))
        .body(Body::from(body))
        .unwrap()
}

pub async fn spawn_static_server(root: &Path, options: StaticOptions) -> StaticServer {
    let log = Arc::new(Mutex::new(Vec::new()));
    let state = StaticState {
        root: root.to_path_buf(),
        options,
        log: log.clone(),
    };
    let app = Router::new().fallback(static_handler).with_state(state);
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    let (tx, rx) = oneshot::channel::<()>();
    tokio::spawn(async move {
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = rx.await;
            })
            .await
            .unwrap();
    });
    StaticServer {
        addr,
        log,
        shutdown: Some(tx),
    }
}

// ---------------------------------------------------------------------------
// Running vault service.

pub struct VaultServer {
    pub dir: tempfile::TempDir,
    pub addr: SocketAddr,
    pub vault: Arc<Vault>,
    pub tokens: HashMap<String, String>,
    shutdown: Option<oneshot::Sender<()>>,
}

impl VaultServer {
    pub fn url(&self, path: &str) -> String {
        format!("http://{}{}", self.addr, path)
    }

    pub fn token(&self, user: &str) -> &str {
        &self.tokens[user]
    }

    pub fn layout(&self) -> &VaultLayout {
        self.vault.layout()
    }
}

impl Drop for VaultServer {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
    }
}

pub struct VaultSpec {
    pub policy: PlacementPolicy,
    pub key: SecretKey,
    pub clock: Option<Arc<dyn Clock>>,
    pub max_upload: u64,
    /// (username, role) pairs to mint tokens for.
    pub users: Vec<(&'static str, Role)>,
}

impl Default for VaultSpec {
    fn default() -> Self {
        VaultSpec {
            policy: PlacementPolicy::DeniedSubdir,
            key: SecretKey::new(b"test-key-0123456789".to_vec(), KeySource::Inline).unwrap(),
            clock: None,
            max_upload: 64 * 1024 * 1024,
            users: vec![("alice", Role::User), ("bob", Role::User), ("root", Role::Admin)],
        }
    }
}

pub fn vault_paths(root: &Path, policy: PlacementPolicy) -> (PathBuf, PathBuf) {
    let webroot = root.join("www");
    let vault = match policy {
        PlacementPolicy::OutsideWebRoot => root.join("vault"),
        _ => webroot.join("docs"),
    };
    (webroot, vault)
}

pub async fn spawn_vault(spec: VaultSpec) -> VaultServer {
    let dir = tempfile::tempdir().unwrap();
    let (webroot, vault_dir) = vault_paths(dir.path(), spec.policy);
    std::fs::create_dir_all(&webroot).unwrap();
    let layout = plan_layout(spec.policy, &webroot, &vault_dir).unwrap();
    materialize_layout(&layout, false).unwrap();
    let store = MetadataStore::open(dir.path().join("meta.journal")).unwrap();
    let mut tokens = HashMap::new();
    for (user, role) in &spec.users {
        let issued = issue_token(&store, Principal::new(*user, *role).unwrap()).unwrap();
        tokens.insert(user.to_string(), issued.plaintext);
    }
    let mut builder = Vault::builder(layout, store, spec.key).max_upload_bytes(spec.max_upload);
    if let Some(clock) = spec.clock {
        builder = builder.clock(clock);
    }
    let vault = Arc::new(builder.build());

    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    let (tx, rx) = oneshot::channel::<()>();
    let served = vault.clone();
    tokio::spawn(async move {
        http::serve(listener, served, async {
            let _ = rx.await;
        })
        .await
        .unwrap();
    });
    VaultServer {
        dir,
        addr,
        vault,
        tokens,
        shutdown: Some(tx),
    }
}

// ---------------------------------------------------------------------------
// Raw HTTP/1.1 client over a plain TCP socket. Blocking; call from
// `spawn_blocking` inside async tests.

#[derive(Debug)]
pub struct RawResponse {
    pub status: u16,
    /// Header names lowercased, in received order.
    pub headers: Vec<(String, String)>,
    pub body: Vec<u8>,
}

impl RawResponse {
    pub fn header(&self, name: &str) -> Option<&str> {
        let name = name.to_ascii_lowercase();
        self.headers
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, v)| v.as_str())
    }

    pub fn text(&self) -> String {
        String::from_utf8_lossy(&self.body).into_owned()
    }

    /// Status line, headers and body as one lossy string.
    pub fn everything(&self) -> String {
        let mut s = format!("{}\n", self.status);
        for (n, v) in &self.headers {
            s.push_str(&format!("{n}: {v}\n"));
        }
        s.push_str(&self.text());
        s
    }
}

pub fn raw_request(
    addr: SocketAddr,
    method: &str,
    path: &str,
    headers: &[(&str, &str)],
    body: &[u8],
) -> RawResponse {
    let mut stream = TcpStream::connect(addr).unwrap();
    let mut req = format!("{method} {path} HTTP/1.1\r\nHost: {addr}\r\nConnection: close\r\n");
    for (n, v) in headers {
        req.push_str(&format!("{n}: {v}\r\n"));
    }
    if !body.is_empty() || method == "POST" {
        req.push_str(&format!("Content-Length: {}\r\n", body.len()));
    }
    req.push_str("\r\n");
    stream.write_all(req.as_bytes()).unwrap();
    stream.write_all(body).unwrap();

    let mut reader = BufReader::new(stream);
    let mut line = String::new();
    reader.read_line(&mut line).unwrap();
    let status: u16 = line.split_whitespace().nth(1).unwrap().parse().unwrap();
    let mut headers = Vec::new();
    loop {
        line.clear();
        reader.read_line(&mut line).unwrap();
        let l = line.trim_end();
        if l.is_empty() {
            break;
        }
        let (n, v) = l.split_once(':').unwrap();
        headers.push((n.trim().to_ascii_lowercase(), v.trim().to_string()));
    }
    let get = |name: &str| {
        headers
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.clone())
    };
    let mut body = Vec::new();
    if method == "HEAD" || status == 204 || status == 304 {
        // no body
    } else if get("content-length").is_some() {
        // read to EOF rather than trusting the header, so a wrong
        // Content-Length shows up as a mismatch
        reader.read_to_end(&mut body).unwrap();
    } else if get("transfer-encoding").is_some_and(|v| v.eq_ignore_ascii_case("chunked")) {
        loop {
            line.clear();
            reader.read_line(&mut line).unwrap();
            let size = usize::from_str_radix(line.trim().split(';').next().unwrap(), 16).unwrap();
            if size == 0 {
                line.clear();
                reader.read_line(&mut line).unwrap();
                break;
            }
            let start = body.len();
            body.resize(start + size, 0);
            reader.read_exact(&mut body[start..]).unwrap();
            line.clear();
            reader.read_line(&mut line).unwrap();
        }
    } else {
        reader.read_to_end(&mut body).unwrap();
    }
    RawResponse {
        status,
        headers,
        body,
    }
}

pub fn bearer(token: &str) -> String {
    format!("Bearer {token}")
}

/// Uploads through the raw client and returns the JSON body.
pub fn upload_raw(addr: SocketAddr, token: &str, filename: &str, content: &[u8]) -> RawResponse {
    let auth = bearer(token);
    let path = format!(
        "/documents?filename={}",
        percent_encoding::utf8_percent_encode(filename, percent_encoding::NON_ALPHANUMERIC)
    );
    raw_request(addr, "POST", &path, &[("Authorization", &auth)], content)
}

pub fn json(resp: &RawResponse) -> serde_json::Value {
    serde_json::from_slice(&resp.body).unwrap_or_else(|e| panic!("bad json {e}: {}", resp.text()))
}
