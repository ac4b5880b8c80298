use std::future::IntoFuture;
use std::net::SocketAddr;
use std::path::Path;
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use axum::body::{Body, Bytes};
use axum::extract::State;
use axum::http::{header, HeaderMap, HeaderValue, Method, Response, StatusCode, Uri};
use axum::Router;
use tokio::sync::{watch, Semaphore};

use super::{
    ByteRange, LatencyModel, LatencySampler, LocalBackend, ObjectKey, Result, StorageBackend,
    StorageError,
};

#[derive(Debug, Clone)]
pub struct ServerConfig {
    /// Address to bind; port 0 picks a free port.
    pub addr: SocketAddr,
    pub latency: Option<LatencyModel>,
    pub latency_seed: u64,
    /// Number of requests handled concurrently; further requests queue.
    pub threads: usize,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            addr: SocketAddr::from(([127, 0, 0, 1], 0)),
            latency: None,
            latency_seed: 0,
            threads: 16,
        }
    }
}

/// Embedded object server speaking a path-style S3 subset over HTTP/1.1:
///
/// * `GET /{key}` returns 200 with the object, or 206 with
///   `Content-Range: bytes a-b/total` when a `Range: bytes=a-b` header is sent
/// * `HEAD /{key}` returns headers only
/// * `PUT /{key}` stores the request body
/// * `GET /?prefix=p` lists matching keys, one per line
///
/// Unknown keys yield 404 and unsatisfiable ranges 416. When a latency model
/// is configured every request waits one sampled delay before it is answered.
pub struct ObjectServer {
    addr: SocketAddr,
    stop: watch::Sender<bool>,
    handle: Option<JoinHandle<()>>,
}

struct Shared {
    backend: Arc<dyn StorageBackend>,
    sampler: Option<LatencySampler>,
    permits: Semaphore,
}

/// Grace period for in-flight requests after shutdown is requested.
const DRAIN_TIMEOUT: Duration = Duration::from_secs(1);

impl ObjectServer {
    /// Serves the files under `dir`.
    pub fn serve_dir(dir: impl AsRef<Path>, config: ServerConfig) -> Result<Self> {
        let backend: Arc<dyn StorageBackend> = Arc::new(LocalBackend::new(dir.as_ref())?);
        Self::start(backend, config)
    }

    pub fn start(backend: Arc<dyn StorageBackend>, config: ServerConfig) -> Result<Self> {
        let sampler = config
            .latency
            .map(|m| m.sampler(config.latency_seed))
            .transpose()?;
        let runtime = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(2)
            .thread_name("object-server")
            .enable_io()
            .enable_time()
            .build()?;
        let listener = runtime.block_on(tokio::net::TcpListener::bind(config.addr))?;
        let addr = listener.local_addr()?;
        let shared = Arc::new(Shared {
            backend,
            sampler,
            permits: Semaphore::new(config.threads.max(1)),
        });
        let app = Router::new().fallback(route).with_state(shared);
        let (stop, mut stopped) = watch::channel(false);
        let mut graceful = stop.subscribe();
        let handle = thread::Builder::new()
            .name("object-server-main".into())
            .spawn(move || {
                runtime.block_on(async move {
                    let serve = axum::serve(listener, app)
                        .with_graceful_shutdown(async move {
                            let _ = graceful.wait_for(|s| *s).await;
                        })
                        .into_future();
                    let mut serve = tokio::spawn(serve);
                    tokio::select! {
                        _ = &mut serve => {}
                        _ = stopped.wait_for(|s| *s) => {
                            let _ = tokio::time::timeout(DRAIN_TIMEOUT, serve).await;
                        }
                    }
                });
                runtime.shutdown_background();
            })?;
        Ok(Self {
            addr,
            stop,
            handle: Some(handle),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn port(&self) -> u16 {
        self.addr.port()
    }

    /// Base URL suitable for [`super::HttpBackend::new`].
    pub fn endpoint(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn shutdown(&mut self) {
        let _ = self.stop.send(true);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }

    /// Blocks until the server exits.
    pub fn wait(mut self) {
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

impl Drop for ObjectServer {
    fn drop(&mut self) {
        self.shutdown();
    }
}

async fn route(
    State(shared): State<Arc<Shared>>,
    method: Method,
    uri: Uri,
    headers: HeaderMap,
    body: Bytes,
) -> Response<Body> {
    let Ok(_permit) = shared.permits.acquire().await else {
        return status(StatusCode::SERVICE_UNAVAILABLE);
    };
    if let Some(s) = &shared.sampler {
        tokio::time::sleep(s.sample()).await;
    }
    let range = headers
        .get(header::RANGE)
        .and_then(|v| v.to_str().ok())
        .map(str::to_string);
    let worker = Arc::clone(&shared);
    tokio::task::spawn_blocking(move || {
        handle(
            worker.backend.as_ref(),
            &method,
            &uri,
            range.as_deref(),
            &body,
        )
    })
    .await
    .unwrap_or_else(|_| status(StatusCode::INTERNAL_SERVER_ERROR))
}

fn status(code: StatusCode) -> Response<Body> {
    respond(code, Vec::new(), &[])
}

fn respond(
    code: StatusCode,
    body: Vec<u8>,
    headers: &[(header::HeaderName, String)],
) -> Response<Body> {
    let mut resp = Response::new(Body::from(body));
    *resp.status_mut() = code;
    for (name, value) in headers {
        if let Ok(v) = HeaderValue::from_str(value) {
            resp.headers_mut().insert(name.clone(), v);
        }
    }
    resp
}

fn percent_decode(s: &str) -> Option<String> {
    let bytes = s.as_bytes();
    let mut out = Vec::with_capacity(bytes.len());
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'%' {
            let hex = s.get(i + 1..i + 3)?;
            out.push(u8::from_str_radix(hex, 16).ok()?);
            i += 3;
        } else {
            out.push(bytes[i]);
            i += 1;
        }
    }
    String::from_utf8(out).ok()
}

/// Parsed `Range` header, before resolution against the object size.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum RangeSpec {
    Span(ByteRange),
    Suffix(u64),
}

/// Parses a single `bytes=` range. Malformed or multi-range headers return
/// `None` and are ignored, which serves the full object.
fn parse_range(value: &str) -> Option<RangeSpec> {
    let spec = value.trim().strip_prefix("bytes=")?;
    if spec.contains(',') {
        return None;
    }
    let (a, b) = spec.split_once('-')?;
    let (a, b) = (a.trim(), b.trim());
    if a.is_empty() {
        return b.parse().ok().map(RangeSpec::Suffix);
    }
    let start: u64 = a.parse().ok()?;
    if b.is_empty() {
        return Some(RangeSpec::Span(ByteRange::from_offset(start)));
    }
    let end: u64 = b.parse().ok()?;
    ByteRange::new(start, end).ok().map(RangeSpec::Span)
}

fn handle(
    backend: &dyn StorageBackend,
    method: &Method,
    uri: &Uri,
    range: Option<&str>,
    body: &[u8],
) -> Response<Body> {
    let raw_key = uri.path().trim_start_matches('/');

    if raw_key.is_empty() {
        if method != Method::GET {
            return status(StatusCode::METHOD_NOT_ALLOWED);
        }
        let prefix = uri
            .query()
            .unwrap_or("")
            .split('&')
            .filter_map(|kv| kv.split_once('='))
            .find(|(k, _)| *k == "prefix")
            .and_then(|(_, v)| percent_decode(&v.replace('+', " ")))
            .unwrap_or_default();
        return match backend.list(&prefix) {
            Ok(keys) => {
                let mut listing = String::new();
                for k in keys {
                    listing.push_str(k.as_str());
                    listing.push('\n');
                }
                respond(
                    StatusCode::OK,
                    listing.into_bytes(),
                    &[(header::CONTENT_TYPE, "text/plain".into())],
                )
            }
            Err(_) => status(StatusCode::INTERNAL_SERVER_ERROR),
        };
    }

    let Some(key) = percent_decode(raw_key).and_then(|k| ObjectKey::new(k).ok()) else {
        return status(StatusCode::BAD_REQUEST);
    };
    let accept = (header::ACCEPT_RANGES, "bytes".to_string());

    match *method {
        Method::GET => {
            let len = match backend.head(&key) {
                Ok(len) => len,
                Err(e) => return status(error_status(&e)),
            };
            let span = match range.and_then(parse_range) {
                None => None,
                Some(spec) => {
                    let resolved = match spec {
                        RangeSpec::Span(r) => Some(r),
                        RangeSpec::Suffix(n) if n > 0 && len > 0 => {
                            ByteRange::new(len.saturating_sub(n), len - 1).ok()
                        }
                        RangeSpec::Suffix(_) => None,
                    };
                    match resolved.filter(|r| r.resolve(&key, len).is_ok()) {
                        Some(r) => Some(r),
                        None => {
                            return respond(
                                StatusCode::RANGE_NOT_SATISFIABLE,
                                Vec::new(),
                                &[(header::CONTENT_RANGE, format!("bytes */{len}"))],
                            )
                        }
                    }
                }
            };
            match backend.get(&key, span) {
                Ok(data) => match span {
                    Some(r) => {
                        let end = r.start + data.len() as u64 - 1;
                        let cr = format!("bytes {}-{}/{}", r.start, end, len);
                        respond(
                            StatusCode::PARTIAL_CONTENT,
                            data,
                            &[(header::CONTENT_RANGE, cr), accept],
                        )
                    }
                    None => respond(StatusCode::OK, data, &[accept]),
                },
                Err(e) => status(error_status(&e)),
            }
        }
        Method::HEAD => match backend.head(&key) {
            Ok(len) => respond(
                StatusCode::OK,
                Vec::new(),
                &[(header::CONTENT_LENGTH, len.to_string()), accept],
            ),
            Err(e) => status(error_status(&e)),
        },
        Method::PUT => match backend.put(&key, body) {
            Ok(()) => status(StatusCode::OK),
            Err(e) => status(error_status(&e)),
        },
        _ => status(StatusCode::METHOD_NOT_ALLOWED),
    }
}

fn error_status(err: &StorageError) -> StatusCode {
    match err {
        StorageError::NotFound(_) => StatusCode::NOT_FOUND,
        StorageError::RangeNotSatisfiable { .. } => StatusCode::RANGE_NOT_SATISFIABLE,
        StorageError::InvalidKey(_) | StorageError::InvalidRange(_) => StatusCode::BAD_REQUEST,
        StorageError::WriteDenied(_) => StatusCode::FORBIDDEN,
        _ => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn range_header_forms() {
        assert_eq!(
            parse_range("bytes=0-63"),
            Some(RangeSpec::Span(ByteRange::new(0, 63).unwrap()))
        );
        assert_eq!(
            parse_range("bytes=5-"),
            Some(RangeSpec::Span(ByteRange::from_offset(5)))
        );
        assert_eq!(parse_range("bytes=-4"), Some(RangeSpec::Suffix(4)));
        assert_eq!(parse_range("bytes=9-3"), None);
        assert_eq!(parse_range("bytes=0-1,4-5"), None);
        assert_eq!(parse_range("items=0-1"), None);
    }

    #[test]
    fn decodes_percent_escapes() {
        assert_eq!(percent_decode("a%2Fb").as_deref(), Some("a/b"));
        assert_eq!(percent_decode("bad%zz"), None);
    }
}
