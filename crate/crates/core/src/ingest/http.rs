use std::thread;
use std::time::Duration;

use super::store::SnapshotStore;
use super::IngestError;

/// Exponential backoff schedule for transient HTTP failures.
#[derive(Clone, Debug)]
pub struct RetryPolicy {
    pub base_delay: Duration,
    pub factor: f64,
    pub max_attempts: u32,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            base_delay: Duration::from_millis(500),
            factor: 2.0,
            max_attempts: 5,
        }
    }
}

impl RetryPolicy {
    /// Delay before retry number `attempt` (1-based).
    pub fn delay(&self, attempt: u32) -> Duration {
        self.base_delay.mul_f64(self.factor.powi(attempt as i32 - 1))
    }
}

/// Snapshot served over HTTP with the same layout as a local snapshot
/// directory, plus an `index.txt` listing the file names one per line.
/// Content is read with ranged GETs.
pub struct HttpStore {
    base: String,
    agent: ureq::Agent,
    retry: RetryPolicy,
}

enum Attempt {
    Done(Vec<u8>),
    Fatal(IngestError),
    Retry(String),
}

impl HttpStore {
    pub fn new(base: &str, retry: RetryPolicy) -> HttpStore {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(60)))
            .build()
            .into();
        HttpStore {
            base: base.trim_end_matches('/').to_string(),
            agent,
            retry,
        }
    }

    fn get(&self, path: &str, range: Option<(u64, u64)>) -> Attempt {
        let url = format!("{}/{}", self.base, path);
        let mut request = self.agent.get(&url);
        if let Some((start, end)) = range {
            request = request.header("Range", &format!("bytes={start}-{end}"));
        }
        let mut response = match request.call() {
            Ok(r) => r,
            Err(e) => return Attempt::Retry(format!("{url}: {e}")),
        };
        let status = response.status().as_u16();
        match status {
            200 | 206 => {}
            416 => return Attempt::Done(Vec::new()),
            404 | 403 | 401 => {
                return Attempt::Fatal(IngestError::LocationUnreadable {
                    location: url,
                    reason: format!("HTTP {status}"),
                })
            }
            _ => return Attempt::Retry(format!("{url}: HTTP {status}")),
        }
        let body = match response.body_mut().with_config().limit(u64::MAX).read_to_vec() {
            Ok(b) => b,
            Err(e) => return Attempt::Retry(format!("{url}: {e}")),
        };
        match (status, range) {
            // Server ignored the range header and sent the whole file.
            (200, Some((start, end))) => {
                let start = (start as usize).min(body.len());
                let end = (end as usize + 1).min(body.len());
                Attempt::Done(body[start..end].to_vec())
            }
            _ => Attempt::Done(body),
        }
    }

    fn get_with_retry(&self, path: &str, range: Option<(u64, u64)>) -> Result<Vec<u8>, IngestError> {
        let mut last = String::new();
        for attempt in 1..=self.retry.max_attempts {
            match self.get(path, range) {
                Attempt::Done(bytes) => return Ok(bytes),
                Attempt::Fatal(e) => return Err(e),
                Attempt::Retry(msg) => {
                    log::warn!("attempt {attempt}/{} failed: {msg}", self.retry.max_attempts);
                    last = msg;
                    if attempt < self.retry.max_attempts {
                        thread::sleep(self.retry.delay(attempt));
                    }
                }
            }
        }
        Err(IngestError::Io(format!(
            "giving up after {} attempts: {last}",
            self.retry.max_attempts
        )))
    }
}

impl SnapshotStore for HttpStore {
    fn describe(&self) -> String {
        self.base.clone()
    }

    fn list_files(&mut self) -> Result<Vec<String>, IngestError> {
        let index = self.get_with_retry("index.txt", None)?;
        let index = String::from_utf8(index).map_err(|e| IngestError::LocationUnreadable {
            location: format!("{}/index.txt", self.base),
            reason: e.to_string(),
        })?;
        Ok(index
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(String::from)
            .collect())
    }

    fn read_at(&mut self, file: &str, offset: u64, max_len: usize) -> Result<Vec<u8>, IngestError> {
        if max_len == 0 {
            return Ok(Vec::new());
        }
        self.get_with_retry(file, Some((offset, offset + max_len as u64 - 1)))
    }
}
