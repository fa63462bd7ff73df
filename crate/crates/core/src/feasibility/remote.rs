//! Relatedness lookups against a ConceptNet-style HTTP service, with an
//! append-only TSV cache so repeat runs never touch the network.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use super::{io_err, FeasibilityError, FeasibilityTable, Provenance, Result};
use crate::data::VocabSpace;

pub const DEFAULT_BASE_URL: &str = "https://api.conceptnet.io";
/// Directory holding the shared relatedness cache.
pub const CACHE_DIR_ENV: &str = "ASP_CACHE_DIR";
const CACHE_FILE: &str = "relatedness.tsv";

#[derive(Debug, Clone, PartialEq)]
pub struct ClientConfig {
    pub base_url: String,
    pub max_attempts: usize,
    /// Wait after the first failed attempt; doubles on each further failure.
    pub backoff: Duration,
    /// Upper bound on a server-requested `Retry-After` wait.
    pub max_retry_wait: Duration,
    pub max_in_flight: usize,
    pub timeout: Duration,
}

impl Default for ClientConfig {
    fn default() -> Self {
        ClientConfig {
            base_url: DEFAULT_BASE_URL.to_string(),
            max_attempts: 3,
            backoff: Duration::from_millis(500),
            max_retry_wait: Duration::from_secs(60),
            max_in_flight: 4,
            timeout: Duration::from_secs(30),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HttpResponse {
    pub status: u16,
    pub retry_after: Option<Duration>,
    pub body: String,
}

/// A failure below the HTTP layer (connection refused, timeout, ...).
/// Always retried.
#[derive(Debug, Clone, thiserror::Error)]
#[error("{0}")]
pub struct TransportError(pub String);

pub trait Transport: Send + Sync {
    fn get(&self, url: &str) -> std::result::Result<HttpResponse, TransportError>;
}

pub struct UreqTransport {
    agent: ureq::Agent,
}

impl UreqTransport {
    pub fn new(timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        UreqTransport { agent }
    }
}

impl Transport for UreqTransport {
    fn get(&self, url: &str) -> std::result::Result<HttpResponse, TransportError> {
        let mut resp = self.agent.get(url).call().map_err(|e| TransportError(e.to_string()))?;
        let status = resp.status().as_u16();
        let retry_after = resp
            .headers()
            .get("retry-after")
            .and_then(|v| v.to_str().ok())
            .and_then(|s| s.trim().parse::<u64>().ok())
            .map(Duration::from_secs);
        let body = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| TransportError(e.to_string()))?;
        Ok(HttpResponse {
            status,
            retry_after,
            body,
        })
    }
}

type Sleeper = Box<dyn Fn(Duration) + Send + Sync>;

pub struct RelatednessClient {
    config: ClientConfig,
    transport: Box<dyn Transport>,
    sleeper: Sleeper,
    requests: AtomicUsize,
}

impl RelatednessClient {
    pub fn new(config: ClientConfig, transport: Box<dyn Transport>) -> Self {
        RelatednessClient {
            config,
            transport,
            sleeper: Box::new(std::thread::sleep),
            requests: AtomicUsize::new(0),
        }
    }

    /// Client over HTTP with the configured timeout.
    pub fn http(config: ClientConfig) -> Self {
        let transport = UreqTransport::new(config.timeout);
        Self::new(config, Box::new(transport))
    }

    /// Replaces the function used to wait between attempts.
    pub fn with_sleeper(mut self, sleeper: impl Fn(Duration) + Send + Sync + 'static) -> Self {
        self.sleeper = Box::new(sleeper);
        self
    }

    pub fn config(&self) -> &ClientConfig {
        &self.config
    }

    /// Number of HTTP requests issued so far.
    pub fn requests(&self) -> usize {
        self.requests.load(Ordering::SeqCst)
    }

    /// Service term for a vocabulary name: lowercase, whitespace runs
    /// replaced by underscores.
    pub fn term(name: &str) -> String {
        name.split_whitespace().collect::<Vec<_>>().join("_").to_lowercase()
    }

    pub fn url_for(&self, attr: &str, obj: &str) -> Result<String> {
        let bad = || FeasibilityError::BaseUrl(self.config.base_url.clone());
        let mut url = url::Url::parse(&self.config.base_url).map_err(|_| bad())?;
        url.path_segments_mut().map_err(|_| bad())?.pop_if_empty().push("relatedness");
        url.query_pairs_mut()
            .append_pair("node1", &format!("/c/en/{}", Self::term(attr)))
            .append_pair("node2", &format!("/c/en/{}", Self::term(obj)));
        Ok(url.into())
    }

    /// Relatedness of two names in `[-1, 1]`. Identical terms score 1
    /// without a request; terms the service does not know score 0.
    pub fn fetch(&self, attr: &str, obj: &str) -> Result<f64> {
        if Self::term(attr) == Self::term(obj) {
            return Ok(1.0);
        }
        let url = self.url_for(attr, obj)?;
        let attempts = self.config.max_attempts.max(1);
        let mut last = String::new();
        for attempt in 0..attempts {
            self.requests.fetch_add(1, Ordering::SeqCst);
            let backoff = self.config.backoff * 2u32.saturating_pow(attempt as u32);
            let wait = match self.transport.get(&url) {
                Ok(resp) if resp.status == 200 => return parse_value(&url, &resp.body, attr, obj),
                Ok(resp) if resp.status == 404 => {
                    log::warn!("relatedness of {attr:?} and {obj:?}: unknown term, scored 0");
                    return Ok(0.0);
                }
                Ok(resp) if resp.status == 429 => {
                    last = "HTTP 429".into();
                    resp.retry_after.map_or(backoff, |w| w.min(self.config.max_retry_wait))
                }
                Ok(resp) if resp.status >= 500 => {
                    last = format!("HTTP {}", resp.status);
                    backoff
                }
                Ok(resp) => {
                    return Err(FeasibilityError::Http {
                        url,
                        status: resp.status,
                    })
                }
                Err(e) => {
                    last = e.0;
                    backoff
                }
            };
            if attempt + 1 < attempts {
                log::debug!("{url}: {last}, retrying in {wait:?}");
                (self.sleeper)(wait);
            }
        }
        Err(FeasibilityError::Network { url, attempts, last })
    }
}

fn parse_value(url: &str, body: &str, attr: &str, obj: &str) -> Result<f64> {
    let bad = |message: String| FeasibilityError::BadResponse {
        url: url.to_string(),
        message,
    };
    let json: serde_json::Value = serde_json::from_str(body).map_err(|e| bad(e.to_string()))?;
    if json.get("error").is_some() {
        log::warn!("relatedness of {attr:?} and {obj:?}: service reported an error, scored 0");
        return Ok(0.0);
    }
    let value = json
        .get("value")
        .and_then(|v| v.as_f64())
        .ok_or_else(|| bad("no numeric \"value\" field".into()))?;
    if !(-1.0..=1.0).contains(&value) {
        return Err(bad(format!("value {value} outside [-1, 1]")));
    }
    Ok(value)
}

/// Cache location: `explicit` if given, else `$ASP_CACHE_DIR/relatedness.tsv`,
/// else `.asp-cache/relatedness.tsv` under the working directory.
pub fn cache_path(explicit: Option<&Path>) -> PathBuf {
    if let Some(p) = explicit {
        return p.to_path_buf();
    }
    let dir = std::env::var_os(CACHE_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(".asp-cache"));
    dir.join(CACHE_FILE)
}

struct CacheState {
    entries: HashMap<(String, String), f64>,
    file: Option<File>,
}

/// Append-only `attribute<TAB>object<TAB>score` file keyed by vocabulary
/// names; readable by [`load_feasibility`](super::load_feasibility).
pub struct RelatednessCache {
    path: PathBuf,
    state: Mutex<CacheState>,
}

impl RelatednessCache {
    pub fn open(path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        let mut entries = HashMap::new();
        if path.exists() {
            let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
            for (i, line) in text.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let parse_err = || FeasibilityError::Parse {
                    line: i + 1,
                    message: format!("{}: malformed cache line", path.display()),
                };
                let mut f = line.trim_end_matches('\r').split('\t');
                let (Some(a), Some(o), Some(s), None) = (f.next(), f.next(), f.next(), f.next()) else {
                    return Err(parse_err());
                };
                let score: f64 = s.parse().map_err(|_| parse_err())?;
                if !(-1.0..=1.0).contains(&score) {
                    return Err(FeasibilityError::Range { line: i + 1, value: score });
                }
                entries.insert((a.to_string(), o.to_string()), score);
            }
        }
        Ok(RelatednessCache {
            path,
            state: Mutex::new(CacheState { entries, file: None }),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn len(&self) -> usize {
        self.state.lock().unwrap().entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, attr: &str, obj: &str) -> Option<f64> {
        self.state
            .lock()
            .unwrap()
            .entries
            .get(&(attr.to_string(), obj.to_string()))
            .copied()
    }

    pub fn append(&self, attr: &str, obj: &str, score: f64) -> Result<()> {
        let mut state = self.state.lock().unwrap();
        if state.file.is_none() {
            if let Some(dir) = self.path.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(io_err(dir))?;
            }
            let file = OpenOptions::new()
                .create(true)
                .append(true)
                .open(&self.path)
                .map_err(io_err(&self.path))?;
            state.file = Some(file);
        }
        let file = state.file.as_mut().expect("opened above");
        writeln!(file, "{attr}\t{obj}\t{score}")
            .and_then(|_| file.flush())
            .map_err(io_err(&self.path))?;
        state.entries.insert((attr.to_string(), obj.to_string()), score);
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FetchStats {
    pub cache_hits: usize,
    pub fetched: usize,
}

/// Scores every composition of `vocab`, serving cached pairs locally and
/// fetching the rest with at most `max_in_flight` concurrent requests.
pub fn fetch_table(
    client: &RelatednessClient,
    vocab: &VocabSpace,
    cache: &RelatednessCache,
) -> Result<(FeasibilityTable, FetchStats)> {
    let mut table = FeasibilityTable::zeros(vocab, Provenance::RemoteService);
    let mut stats = FetchStats::default();
    let mut misses = Vec::new();
    for a in 0..vocab.n_attrs() {
        for o in 0..vocab.n_objs() {
            match cache.get(&vocab.attributes()[a], &vocab.objects()[o]) {
                Some(s) => {
                    table.set(a, o, s);
                    stats.cache_hits += 1;
                }
                None => misses.push((a, o)),
            }
        }
    }
    if misses.is_empty() {
        return Ok((table, stats));
    }

    let next = AtomicUsize::new(0);
    let failed = AtomicBool::new(false);
    let results: Mutex<Vec<Option<f64>>> = Mutex::new(vec![None; misses.len()]);
    let first_error: Mutex<Option<FeasibilityError>> = Mutex::new(None);
    let workers = client.config.max_in_flight.clamp(1, misses.len());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                if failed.load(Ordering::SeqCst) {
                    return;
                }
                let k = next.fetch_add(1, Ordering::SeqCst);
                let Some(&(a, o)) = misses.get(k) else { return };
                let (attr, obj) = (&vocab.attributes()[a], &vocab.objects()[o]);
                let outcome = client.fetch(attr, obj).and_then(|s| cache.append(attr, obj, s).map(|_| s));
                match outcome {
                    Ok(s) => results.lock().unwrap()[k] = Some(s),
                    Err(e) => {
                        failed.store(true, Ordering::SeqCst);
                        first_error.lock().unwrap().get_or_insert(e);
                        return;
                    }
                }
            });
        }
    });
    if let Some(e) = first_error.into_inner().unwrap() {
        return Err(e);
    }
    for (&(a, o), s) in misses.iter().zip(results.into_inner().unwrap()) {
        table.set(a, o, s.expect("every miss resolved"));
        stats.fetched += 1;
    }
    Ok((table, stats))
}
