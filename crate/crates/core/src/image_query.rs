//! Grounding statements through an image search provider.

use crate::normalize::{collapse_whitespace, Reject, SkipReason, Statement, StatementKind};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};
use thiserror::Error;
use url::Url;

/// Images kept per query.
pub const DEFAULT_N: usize = 10;
/// Rows per group in the site table.
pub const DEFAULT_TOP_SITES: usize = 10;

#[derive(Debug, Error)]
pub enum ProviderError {
    #[error("transport: {0}")]
    Transport(String),
    #[error("unexpected response: {0}")]
    Response(String),
}

/// Something that turns a text query into an ordered list of image urls.
pub trait ImageProvider: Send + Sync {
    fn search(&self, query: &str, n: usize) -> Result<Vec<String>, ProviderError>;
}

/// Offline provider backed by a query -> urls map.
#[derive(Debug, Clone, Default)]
pub struct FixtureProvider {
    results: HashMap<String, Vec<String>>,
}

/// One line of a fixture file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixtureRecord {
    pub query: String,
    pub urls: Vec<String>,
}

impl FixtureProvider {
    pub fn new(records: Vec<FixtureRecord>) -> Self {
        Self {
            results: records.into_iter().map(|r| (r.query, r.urls)).collect(),
        }
    }
}

impl ImageProvider for FixtureProvider {
    fn search(&self, query: &str, n: usize) -> Result<Vec<String>, ProviderError> {
        Ok(self
            .results
            .get(query)
            .map(|urls| urls.iter().take(n).cloned().collect())
            .unwrap_or_default())
    }
}

/// Token bucket: `burst` tokens, refilled at `per_second`.
#[derive(Debug)]
pub struct RateLimiter {
    state: Mutex<(f64, Instant)>,
    per_second: f64,
    burst: f64,
}

impl RateLimiter {
    pub fn new(per_second: f64, burst: u32) -> Self {
        let burst = f64::from(burst.max(1));
        Self {
            state: Mutex::new((burst, Instant::now())),
            per_second,
            burst,
        }
    }

    /// Blocks until a token is available.
    pub fn acquire(&self) {
        loop {
            let wait = {
                let mut guard = self.state.lock().expect("rate limiter poisoned");
                let (tokens, last) = &mut *guard;
                let now = Instant::now();
                *tokens = (*tokens + now.duration_since(*last).as_secs_f64() * self.per_second).min(self.burst);
                *last = now;
                if *tokens >= 1.0 {
                    *tokens -= 1.0;
                    return;
                }
                Duration::from_secs_f64((1.0 - *tokens) / self.per_second)
            };
            std::thread::sleep(wait);
        }
    }
}

/// Pulls image urls out of a provider's response body.
pub trait ResponseAdapter: Send + Sync {
    fn parse(&self, body: &str) -> Result<Vec<String>, ProviderError>;
}

/// Reads an array at a JSON pointer; elements are url strings or objects with
/// a `field` member.
#[derive(Debug, Clone)]
pub struct JsonPointerAdapter {
    pub pointer: String,
    pub field: String,
}

impl Default for JsonPointerAdapter {
    fn default() -> Self {
        Self {
            pointer: "/images".into(),
            field: "url".into(),
        }
    }
}

impl ResponseAdapter for JsonPointerAdapter {
    fn parse(&self, body: &str) -> Result<Vec<String>, ProviderError> {
        let json: serde_json::Value = serde_json::from_str(body).map_err(|e| ProviderError::Response(e.to_string()))?;
        let items = json
            .pointer(&self.pointer)
            .and_then(|v| v.as_array())
            .ok_or_else(|| ProviderError::Response(format!("no array at {}", self.pointer)))?;
        Ok(items
            .iter()
            .filter_map(|item| match item {
                serde_json::Value::String(s) => Some(s.clone()),
                other => other.get(&self.field).and_then(|v| v.as_str()).map(str::to_string),
            })
            .collect())
    }
}

/// HTTP GET provider: `{endpoint}?{query_param}=<query>&{count_param}=<n>`.
pub struct LiveProvider {
    endpoint: Url,
    query_param: String,
    count_param: String,
    client: reqwest::blocking::Client,
    adapter: Box<dyn ResponseAdapter>,
    limiter: RateLimiter,
}

impl LiveProvider {
    pub fn new(
        endpoint: &str,
        adapter: Box<dyn ResponseAdapter>,
        queries_per_second: f64,
    ) -> Result<Self, ProviderError> {
        let endpoint = Url::parse(endpoint).map_err(|e| ProviderError::Transport(e.to_string()))?;
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(30))
            .build()
            .map_err(|e| ProviderError::Transport(e.to_string()))?;
        Ok(Self {
            endpoint,
            query_param: "q".into(),
            count_param: "n".into(),
            client,
            adapter,
            limiter: RateLimiter::new(queries_per_second, 1),
        })
    }
}

impl ImageProvider for LiveProvider {
    fn search(&self, query: &str, n: usize) -> Result<Vec<String>, ProviderError> {
        self.limiter.acquire();
        let mut url = self.endpoint.clone();
        url.query_pairs_mut()
            .append_pair(&self.query_param, query)
            .append_pair(&self.count_param, &n.to_string());
        let resp = self
            .client
            .get(url)
            .send()
            .map_err(|e| ProviderError::Transport(e.to_string()))?;
        if !resp.status().is_success() {
            return Err(ProviderError::Transport(format!("status {}", resp.status())));
        }
        let body = resp.text().map_err(|e| ProviderError::Transport(e.to_string()))?;
        let mut urls = self.adapter.parse(&body)?;
        urls.truncate(n);
        Ok(urls)
    }
}

/// Search query for a statement: commas removed, whitespace collapsed.
pub fn build_query(statement: &str) -> String {
    collapse_whitespace(&statement.replace(',', " "))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageResult {
    pub statement_id: String,
    pub statement_kind: StatementKind,
    pub source: String,
    /// 1-based position in the provider's list.
    pub rank: usize,
    pub image_url: String,
    pub site: String,
}

#[derive(Debug, Clone)]
pub struct SearchConfig {
    pub n: usize,
    pub attempts: u32,
    pub backoff: Duration,
    pub excluded_sources: HashSet<String>,
    pub blocked_sites: HashSet<String>,
    pub max_in_flight: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            n: DEFAULT_N,
            attempts: 3,
            backoff: Duration::from_millis(500),
            excluded_sources: HashSet::new(),
            blocked_sites: HashSet::new(),
            max_in_flight: 4,
        }
    }
}

fn site_of(url: &str) -> Option<String> {
    let parsed = Url::parse(url).ok()?;
    if !matches!(parsed.scheme(), "http" | "https") {
        return None;
    }
    parsed.host_str().map(str::to_ascii_lowercase)
}

/// Calls the provider with exponential backoff.
pub fn search_with_retry(
    provider: &dyn ImageProvider,
    query: &str,
    config: &SearchConfig,
) -> Result<Vec<String>, SkipReason> {
    let mut delay = config.backoff;
    let mut last = String::new();
    for attempt in 1..=config.attempts.max(1) {
        match provider.search(query, config.n) {
            Ok(urls) => return Ok(urls),
            Err(e) => {
                log::warn!("query `{query}` attempt {attempt} failed: {e}");
                last = e.to_string();
                if attempt < config.attempts {
                    std::thread::sleep(delay);
                    delay *= 2;
                }
            }
        }
    }
    Err(SkipReason::ProviderFailed {
        attempts: config.attempts.max(1),
        message: last,
    })
}

/// Searches one statement. Results keep provider order; malformed and
/// blocklisted urls are dropped.
pub fn search(
    provider: &dyn ImageProvider,
    statement: &Statement,
    config: &SearchConfig,
) -> Result<Vec<ImageResult>, SkipReason> {
    if config.excluded_sources.contains(&statement.source) {
        return Err(SkipReason::ExcludedSource {
            source_tag: statement.source.clone(),
        });
    }
    let query = build_query(&statement.text);
    if query.is_empty() {
        return Err(SkipReason::EmptyQuery);
    }
    let urls = search_with_retry(provider, &query, config)?;
    Ok(urls
        .into_iter()
        .take(config.n)
        .enumerate()
        .filter_map(|(i, url)| {
            let site = site_of(&url)?;
            if config.blocked_sites.contains(&site) {
                return None;
            }
            Some(ImageResult {
                statement_id: statement.id.clone(),
                statement_kind: statement.kind,
                source: statement.source.clone(),
                rank: i + 1,
                image_url: url,
                site,
            })
        })
        .collect())
}

/// Searches every statement with at most `max_in_flight` concurrent calls.
/// Output order follows the input order regardless of completion order.
pub fn run(
    provider: &dyn ImageProvider,
    statements: &[Statement],
    config: &SearchConfig,
) -> (Vec<ImageResult>, Vec<Reject>) {
    type Slot = Mutex<Option<Result<Vec<ImageResult>, SkipReason>>>;
    let slots: Vec<Slot> = statements.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let workers = config.max_in_flight.clamp(1, statements.len().max(1));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(statement) = statements.get(i) else {
                    break;
                };
                let outcome = search(provider, statement, config);
                *slots[i].lock().expect("slot poisoned") = Some(outcome);
            });
        }
    });
    let mut results = Vec::new();
    let mut rejects = Vec::new();
    for (statement, slot) in statements.iter().zip(slots) {
        match slot.into_inner().expect("slot poisoned").expect("every slot filled") {
            Ok(found) => results.extend(found),
            Err(reason) => rejects.push(Reject {
                id: statement.id.clone(),
                reason,
            }),
        }
    }
    (results, rejects)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SiteCount {
    pub site: String,
    pub images: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SiteTable {
    /// Per source dataset, the top sites by distinct image count.
    pub groups: BTreeMap<String, Vec<SiteCount>>,
    pub unique_sites: usize,
    pub unique_images: usize,
    pub examples: usize,
}

/// Distinct images per site for each source dataset; ties ordered by site.
pub fn site_stats(results: &[ImageResult], top: usize) -> SiteTable {
    let mut per_group: BTreeMap<&str, HashMap<&str, HashSet<&str>>> = BTreeMap::new();
    let mut sites = BTreeSet::new();
    let mut images = HashSet::new();
    for r in results {
        per_group
            .entry(&r.source)
            .or_default()
            .entry(&r.site)
            .or_default()
            .insert(&r.image_url);
        sites.insert(r.site.as_str());
        images.insert(r.image_url.as_str());
    }
    let groups = per_group
        .into_iter()
        .map(|(group, by_site)| {
            let mut counts: Vec<SiteCount> = by_site
                .into_iter()
                .map(|(site, imgs)| SiteCount {
                    site: site.to_string(),
                    images: imgs.len(),
                })
                .collect();
            counts.sort_by(|a, b| b.images.cmp(&a.images).then_with(|| a.site.cmp(&b.site)));
            counts.truncate(top);
            (group.to_string(), counts)
        })
        .collect();
    SiteTable {
        groups,
        unique_sites: sites.len(),
        unique_images: images.len(),
        examples: results.len(),
    }
}
