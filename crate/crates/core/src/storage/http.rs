use std::time::Duration;

use super::{ByteRange, Counters, ObjectKey, Result, StorageBackend, StorageError, StorageStats};

/// Environment variable consulted for the remote endpoint when none is given.
pub const ENDPOINT_ENV: &str = "LOADBENCH_ENDPOINT";

/// Client for the path-style object protocol served by [`super::ObjectServer`]
/// (and by S3-compatible stores for anonymous `GET`/`PUT`/`HEAD`).
#[derive(Debug, Clone)]
pub struct HttpBackend {
    endpoint: String,
    agent: ureq::Agent,
    counters: std::sync::Arc<Counters>,
}

impl HttpBackend {
    /// `endpoint` is a base URL such as `http://127.0.0.1:9000` or
    /// `http://host:9000/bucket`.
    pub fn new(endpoint: impl Into<String>) -> Result<Self> {
        let endpoint = endpoint.into().trim_end_matches('/').to_string();
        if !endpoint.starts_with("http://") {
            return Err(StorageError::Transport(format!(
                "unsupported endpoint {endpoint:?}: only plain http:// is spoken"
            )));
        }
        let config = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .max_idle_connections(256)
            .max_idle_connections_per_host(64)
            .timeout_global(Some(Duration::from_secs(60)))
            .build();
        Ok(Self {
            endpoint,
            agent: ureq::Agent::new_with_config(config),
            counters: Default::default(),
        })
    }

    /// Uses `LOADBENCH_ENDPOINT`.
    pub fn from_env() -> Result<Self> {
        let endpoint = std::env::var(ENDPOINT_ENV)
            .map_err(|_| StorageError::Transport(format!("{ENDPOINT_ENV} is not set")))?;
        Self::new(endpoint)
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    fn url(&self, key: &ObjectKey) -> String {
        format!("{}/{}", self.endpoint, key)
    }
}

fn transport(err: ureq::Error) -> StorageError {
    StorageError::Transport(err.to_string())
}

fn status_error(status: u16, key: &ObjectKey, range: Option<ByteRange>) -> StorageError {
    match status {
        404 => StorageError::NotFound(key.to_string()),
        403 => StorageError::WriteDenied(key.to_string()),
        416 => StorageError::RangeNotSatisfiable {
            key: key.to_string(),
            range: range.unwrap_or(ByteRange::from_offset(0)),
            len: 0,
        },
        other => StorageError::Transport(format!("unexpected status {other} for {key}")),
    }
}

impl StorageBackend for HttpBackend {
    fn get(&self, key: &ObjectKey, range: Option<ByteRange>) -> Result<Vec<u8>> {
        let mut req = self.agent.get(self.url(key));
        if let Some(r) = range {
            req = req.header("Range", r.to_header());
        }
        let mut resp = req.call().map_err(transport)?;
        let status = resp.status().as_u16();
        let expected = if range.is_some() { 206 } else { 200 };
        if status != expected {
            // Drain so the connection can return to the pool.
            let _ = resp.body_mut().read_to_vec();
            return Err(status_error(status, key, range));
        }
        let body = resp
            .body_mut()
            .with_config()
            .limit(u64::MAX)
            .read_to_vec()
            .map_err(transport)?;
        self.counters.record_read(body.len());
        Ok(body)
    }

    fn put(&self, key: &ObjectKey, data: &[u8]) -> Result<()> {
        self.counters.record_request();
        let mut resp = self
            .agent
            .put(self.url(key))
            .send(data)
            .map_err(transport)?;
        let status = resp.status().as_u16();
        let _ = resp.body_mut().read_to_vec();
        match status {
            200 | 201 | 204 => Ok(()),
            other => Err(status_error(other, key, None)),
        }
    }

    fn list(&self, prefix: &str) -> Result<Vec<ObjectKey>> {
        self.counters.record_request();
        let mut resp = self
            .agent
            .get(format!("{}/", self.endpoint))
            .query("prefix", prefix)
            .call()
            .map_err(transport)?;
        if resp.status().as_u16() != 200 {
            return Err(StorageError::Transport(format!(
                "list failed: {}",
                resp.status()
            )));
        }
        let body = resp
            .body_mut()
            .with_config()
            .limit(u64::MAX)
            .read_to_string()
            .map_err(transport)?;
        body.lines()
            .filter(|l| !l.is_empty())
            .map(ObjectKey::new)
            .collect()
    }

    fn head(&self, key: &ObjectKey) -> Result<u64> {
        self.counters.record_request();
        let resp = self.agent.head(self.url(key)).call().map_err(transport)?;
        match resp.status().as_u16() {
            200 => resp
                .headers()
                .get("content-length")
                .and_then(|v| v.to_str().ok())
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| StorageError::Transport("HEAD without Content-Length".into())),
            other => Err(status_error(other, key, None)),
        }
    }

    fn stats(&self) -> StorageStats {
        self.counters.snapshot()
    }

    fn describe(&self) -> String {
        "remote".into()
    }
}
