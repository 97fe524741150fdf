//! OpenAI-compatible gateway for chat completions and embeddings.
//!
//! All traffic goes through an injected [`Transport`], so tests script
//! responses without a network. The gateway enforces a concurrency bound
//! with a fixed worker pool, retries 429/5xx/transport failures on an
//! exponential backoff schedule, meters server-reported token usage per
//! stage, and caches responses keyed by a content hash of the request.

use std::collections::BTreeMap;
use std::collections::HashMap;
use std::collections::VecDeque;
use std::fmt;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Barrier, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::embedding::{l2_normalize, Embedding, EmbeddingProvider};
use crate::error::{io_at, Error, Result};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    /// Total attempts, including the first.
    pub max_attempts: u32,
    pub backoff_base_ms: u64,
    pub backoff_multiplier: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { max_attempts: 4, backoff_base_ms: 500, backoff_multiplier: 2.0 }
    }
}

/// Delay before retry number `retry_index` (0-based): base * multiplier^i.
pub fn backoff_delay_ms(policy: &RetryPolicy, retry_index: u32) -> u64 {
    let factor = policy.backoff_multiplier.powi(retry_index as i32);
    (policy.backoff_base_ms as f64 * factor).round() as u64
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct GatewayConfig {
    pub base_url: String,
    /// Name of the environment variable holding the API key. No key means
    /// no Authorization header (local gateways).
    pub api_key_env: String,
    pub chat_model: String,
    pub embedding_model: String,
    pub embedding_dim: usize,
    pub max_concurrency: usize,
    /// Embedding requests carry at most this many inputs each.
    pub max_batch: usize,
    pub max_output_tokens: u32,
    pub timeout_ms: u64,
    pub retry: RetryPolicy,
    pub cache_path: Option<PathBuf>,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self {
            base_url: "https://api.openai.com".to_string(),
            api_key_env: "OPENAI_API_KEY".to_string(),
            chat_model: "gpt-4o-mini".to_string(),
            embedding_model: "text-embedding-3-small".to_string(),
            embedding_dim: 1536,
            max_concurrency: 30,
            max_batch: 64,
            max_output_tokens: 1024,
            timeout_ms: 60_000,
            retry: RetryPolicy::default(),
            cache_path: None,
        }
    }
}

impl GatewayConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path).map_err(io_at(path))?;
        let cfg: GatewayConfig = serde_json::from_str(&raw)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_concurrency == 0 {
            return Err(Error::Config("max_concurrency must be at least 1".into()));
        }
        if self.max_batch == 0 {
            return Err(Error::Config("max_batch must be at least 1".into()));
        }
        if self.embedding_dim == 0 {
            return Err(Error::Config("embedding_dim must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HttpRequest {
    /// Endpoint path, e.g. "/v1/chat/completions".
    pub path: String,
    pub body: Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HttpResponse {
    pub status: u16,
    pub body: String,
}

pub trait Transport: Send + Sync {
    fn execute(&self, request: &HttpRequest) -> Result<HttpResponse>;
}

/// Real HTTP transport. The only place the crate touches a network.
pub struct HttpTransport {
    client: reqwest::blocking::Client,
    base_url: String,
    api_key: Option<String>,
}

impl HttpTransport {
    pub fn new(cfg: &GatewayConfig) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_millis(cfg.timeout_ms))
            .build()
            .map_err(|e| Error::Transport(e.to_string()))?;
        Ok(Self {
            client,
            base_url: cfg.base_url.trim_end_matches('/').to_string(),
            api_key: std::env::var(&cfg.api_key_env).ok().filter(|k| !k.is_empty()),
        })
    }
}

impl Transport for HttpTransport {
    fn execute(&self, request: &HttpRequest) -> Result<HttpResponse> {
        let url = format!("{}{}", self.base_url, request.path);
        let mut req = self.client.post(url).json(&request.body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| Error::Transport(e.to_string()))?;
        let status = resp.status().as_u16();
        let body = resp.text().map_err(|e| Error::Transport(e.to_string()))?;
        Ok(HttpResponse { status, body })
    }
}

type Responder = Box<dyn Fn(&HttpRequest, usize) -> HttpResponse + Send + Sync>;

/// Scripted transport for tests: replays a response sequence or computes
/// responses from the request, while instrumenting call counts and
/// concurrent in-flight peaks.
pub struct ScriptedTransport {
    responder: Responder,
    calls: AtomicUsize,
    in_flight: AtomicUsize,
    max_in_flight: AtomicUsize,
    rendezvous: Option<(Arc<Barrier>, usize)>,
}

impl ScriptedTransport {
    /// Replays `responses` in order; further calls repeat the last entry.
    pub fn with_responses(responses: Vec<(u16, String)>) -> Self {
        assert!(!responses.is_empty(), "script needs at least one response");
        let queue = Mutex::new(VecDeque::from(responses));
        Self::with_responder(move |_req, _idx| {
            let mut q = queue.lock().expect("script lock");
            let (status, body) = if q.len() > 1 {
                q.pop_front().expect("non-empty")
            } else {
                q.front().cloned().expect("non-empty")
            };
            HttpResponse { status, body }
        })
    }

    pub fn with_responder(f: impl Fn(&HttpRequest, usize) -> HttpResponse + Send + Sync + 'static) -> Self {
        Self {
            responder: Box::new(f),
            calls: AtomicUsize::new(0),
            in_flight: AtomicUsize::new(0),
            max_in_flight: AtomicUsize::new(0),
            rendezvous: None,
        }
    }

    /// The first `parties` calls block until all of them are in flight at
    /// once: proves the pool really runs that wide without sleeps.
    pub fn with_rendezvous(mut self, parties: usize) -> Self {
        self.rendezvous = Some((Arc::new(Barrier::new(parties)), parties));
        self
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn max_in_flight(&self) -> usize {
        self.max_in_flight.load(Ordering::SeqCst)
    }
}

impl Transport for ScriptedTransport {
    fn execute(&self, request: &HttpRequest) -> Result<HttpResponse> {
        let idx = self.calls.fetch_add(1, Ordering::SeqCst);
        let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.max_in_flight.fetch_max(now, Ordering::SeqCst);
        if let Some((barrier, parties)) = &self.rendezvous {
            if idx < *parties {
                barrier.wait();
            }
        }
        let resp = (self.responder)(request, idx);
        self.in_flight.fetch_sub(1, Ordering::SeqCst);
        Ok(resp)
    }
}

/// Which pipeline stage a request bills to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Extraction,
    Embedding,
    Generation,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Extraction => "extraction",
            Stage::Embedding => "embedding",
            Stage::Generation => "generation",
        })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Usage {
    pub requests: u64,
    pub input_tokens: u64,
    pub output_tokens: u64,
    pub retries: u64,
}

impl Usage {
    fn add(&mut self, other: &Usage) {
        self.requests += other.requests;
        self.input_tokens += other.input_tokens;
        self.output_tokens += other.output_tokens;
        self.retries += other.retries;
    }
}

/// Shared token-usage meter; clone handles freely.
#[derive(Debug, Clone, Default)]
pub struct UsageMeter {
    inner: Arc<Mutex<BTreeMap<Stage, Usage>>>,
}

impl UsageMeter {
    pub fn record(&self, stage: Stage, usage: &Usage) {
        self.inner.lock().expect("meter lock").entry(stage).or_default().add(usage);
    }

    pub fn snapshot(&self) -> BTreeMap<Stage, Usage> {
        self.inner.lock().expect("meter lock").clone()
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct PriceTable {
    pub llm_input_per_token: f64,
    pub llm_output_per_token: f64,
    pub embed_per_token: f64,
}

impl Default for PriceTable {
    fn default() -> Self {
        Self { llm_input_per_token: 0.0, llm_output_per_token: 0.0, embed_per_token: 0.0 }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct StageCost {
    pub requests: u64,
    pub input_tokens: u64,
    pub output_tokens: u64,
    pub retries: u64,
    pub cost: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct MeterReport {
    pub stages: BTreeMap<String, StageCost>,
    pub total_cost: f64,
}

/// Prices a meter snapshot. Embedding traffic bills input tokens at the
/// embedding rate; chat traffic bills input and output at the LLM rates.
pub fn meter_report(meter: &UsageMeter, prices: &PriceTable) -> MeterReport {
    let mut stages = BTreeMap::new();
    let mut total = 0.0;
    for (stage, usage) in meter.snapshot() {
        let cost = match stage {
            Stage::Embedding => usage.input_tokens as f64 * prices.embed_per_token,
            Stage::Extraction | Stage::Generation => {
                usage.input_tokens as f64 * prices.llm_input_per_token
                    + usage.output_tokens as f64 * prices.llm_output_per_token
            }
        };
        total += cost;
        stages.insert(
            stage.to_string(),
            StageCost {
                requests: usage.requests,
                input_tokens: usage.input_tokens,
                output_tokens: usage.output_tokens,
                retries: usage.retries,
                cost,
            },
        );
    }
    MeterReport { stages, total_cost: total }
}

/// JSON with object keys sorted recursively; the cache key must not depend
/// on serializer map order.
fn canonical_json(value: &Value) -> String {
    fn write(value: &Value, out: &mut String) {
        match value {
            Value::Object(map) => {
                let mut keys: Vec<&String> = map.keys().collect();
                keys.sort();
                out.push('{');
                for (i, k) in keys.iter().enumerate() {
                    if i > 0 {
                        out.push(',');
                    }
                    out.push_str(&serde_json::to_string(k).expect("string serializes"));
                    out.push(':');
                    write(&map[*k], out);
                }
                out.push('}');
            }
            Value::Array(items) => {
                out.push('[');
                for (i, item) in items.iter().enumerate() {
                    if i > 0 {
                        out.push(',');
                    }
                    write(item, out);
                }
                out.push(']');
            }
            other => out.push_str(&other.to_string()),
        }
    }
    let mut out = String::new();
    write(value, &mut out);
    out
}

fn cache_key(path: &str, body: &Value) -> String {
    let model = body.get("model").and_then(Value::as_str).unwrap_or("");
    let mut hasher = Sha256::new();
    hasher.update(path.as_bytes());
    hasher.update(b"\n");
    hasher.update(model.as_bytes());
    hasher.update(b"\n");
    hasher.update(canonical_json(body).as_bytes());
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Serialize, Deserialize)]
struct CacheRow {
    key: String,
    response: String,
}

/// Append-only JSONL response cache.
struct ResponseCache {
    entries: HashMap<String, String>,
    file: std::fs::File,
}

impl ResponseCache {
    fn open(path: &Path) -> Result<Self> {
        let mut entries = HashMap::new();
        if path.exists() {
            let raw = std::fs::read_to_string(path).map_err(io_at(path))?;
            for line in raw.lines().filter(|l| !l.trim().is_empty()) {
                let row: CacheRow = serde_json::from_str(line).map_err(|e| Error::Corrupted {
                    file: path.display().to_string(),
                    detail: format!("bad cache row: {e}"),
                })?;
                entries.insert(row.key, row.response);
            }
        }
        let file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(io_at(path))?;
        Ok(Self { entries, file })
    }

    fn get(&self, key: &str) -> Option<String> {
        self.entries.get(key).cloned()
    }

    fn put(&mut self, key: String, response: String) -> Result<()> {
        if self.entries.contains_key(&key) {
            return Ok(());
        }
        let row = CacheRow { key: key.clone(), response: response.clone() };
        let mut line = serde_json::to_string(&row)?;
        line.push('\n');
        self.file.write_all(line.as_bytes())?;
        self.file.flush()?;
        self.entries.insert(key, response);
        Ok(())
    }
}

/// Outcome details for a single gateway call.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CallStats {
    pub attempts: u32,
    /// Backoff delays actually slept, in order.
    pub retry_delays_ms: Vec<u64>,
    pub cached: bool,
}

pub struct Gateway {
    cfg: GatewayConfig,
    transport: Arc<dyn Transport>,
    meter: UsageMeter,
    cache: Option<Mutex<ResponseCache>>,
}

impl Gateway {
    pub fn new(cfg: GatewayConfig, transport: Arc<dyn Transport>) -> Result<Self> {
        cfg.validate()?;
        let cache = match &cfg.cache_path {
            Some(path) => Some(Mutex::new(ResponseCache::open(path)?)),
            None => None,
        };
        Ok(Self { cfg, transport, meter: UsageMeter::default(), cache })
    }

    /// Gateway over the real HTTP transport described by `cfg`.
    pub fn over_http(cfg: GatewayConfig) -> Result<Self> {
        let transport = Arc::new(HttpTransport::new(&cfg)?);
        Self::new(cfg, transport)
    }

    pub fn config(&self) -> &GatewayConfig {
        &self.cfg
    }

    pub fn meter(&self) -> &UsageMeter {
        &self.meter
    }

    /// One chat completion. Returns the assistant text and call statistics.
    pub fn chat_complete(&self, stage: Stage, system: &str, user: &str) -> Result<(String, CallStats)> {
        let body = json!({
            "model": self.cfg.chat_model,
            "messages": [
                {"role": "system", "content": system},
                {"role": "user", "content": user},
            ],
            "max_tokens": self.cfg.max_output_tokens,
        });
        let request = HttpRequest { path: "/v1/chat/completions".into(), body };
        let (raw, stats) = self.call(stage, &request)?;
        let parsed: Value = serde_json::from_str(&raw)
            .map_err(|e| Error::Gateway { status: None, message: format!("malformed chat response: {e}") })?;
        let text = parsed["choices"][0]["message"]["content"]
            .as_str()
            .ok_or_else(|| Error::Gateway {
                status: None,
                message: "chat response has no choices[0].message.content".into(),
            })?
            .to_string();
        Ok((text, stats))
    }

    /// Embeds texts in order. Oversized batches split into requests of at
    /// most `max_batch` inputs, executed on the bounded pool. Vectors are
    /// returned as served (no normalization here).
    pub fn embed_texts(&self, texts: &[&str]) -> Result<Vec<Embedding>> {
        if texts.is_empty() {
            return Ok(Vec::new());
        }
        let requests: Vec<HttpRequest> = texts
            .chunks(self.cfg.max_batch)
            .map(|batch| HttpRequest {
                path: "/v1/embeddings".into(),
                body: json!({ "model": self.cfg.embedding_model, "input": batch }),
            })
            .collect();
        let batched: Vec<Result<(String, CallStats)>> = self.call_many(Stage::Embedding, &requests);
        let mut out = Vec::with_capacity(texts.len());
        for (raw, batch) in batched.into_iter().zip(texts.chunks(self.cfg.max_batch)) {
            let (raw, _stats) = raw?;
            let parsed: Value = serde_json::from_str(&raw).map_err(|e| Error::Gateway {
                status: None,
                message: format!("malformed embeddings response: {e}"),
            })?;
            let data = parsed["data"].as_array().ok_or_else(|| Error::Gateway {
                status: None,
                message: "embeddings response has no data array".into(),
            })?;
            if data.len() != batch.len() {
                return Err(Error::Gateway {
                    status: None,
                    message: format!("embeddings response has {} rows for {} inputs", data.len(), batch.len()),
                });
            }
            let mut rows: Vec<(usize, Embedding)> = data
                .iter()
                .map(|row| {
                    let index = row["index"].as_u64().unwrap_or_default() as usize;
                    let values: Option<Vec<f32>> = row["embedding"]
                        .as_array()
                        .map(|xs| xs.iter().filter_map(Value::as_f64).map(|x| x as f32).collect());
                    values
                        .map(|v| (index, Embedding(v)))
                        .ok_or_else(|| Error::Gateway {
                            status: None,
                            message: "embeddings row has no embedding array".into(),
                        })
                })
                .collect::<Result<_>>()?;
            rows.sort_by_key(|(i, _)| *i);
            out.extend(rows.into_iter().map(|(_, e)| e));
        }
        Ok(out)
    }

    fn call(&self, stage: Stage, request: &HttpRequest) -> Result<(String, CallStats)> {
        self.call_many(stage, std::slice::from_ref(request)).remove(0)
    }

    /// Executes requests with cache lookup, a worker pool bounded by
    /// `max_concurrency`, and per-request retries. Results keep request
    /// order; cache writes happen in request order.
    fn call_many(&self, stage: Stage, requests: &[HttpRequest]) -> Vec<Result<(String, CallStats)>> {
        let keys: Vec<String> = requests.iter().map(|r| cache_key(&r.path, &r.body)).collect();
        let mut results: Vec<Option<Result<(String, CallStats)>>> = Vec::new();
        let mut misses: Vec<usize> = Vec::new();
        for (i, key) in keys.iter().enumerate() {
            let hit = self
                .cache
                .as_ref()
                .and_then(|c| c.lock().expect("cache lock").get(key));
            match hit {
                Some(body) => results.push(Some(Ok((
                    body,
                    CallStats { attempts: 0, retry_delays_ms: Vec::new(), cached: true },
                )))),
                None => {
                    results.push(None);
                    misses.push(i);
                }
            }
        }

        if !misses.is_empty() {
            let slots: Mutex<Vec<Option<Result<(String, CallStats)>>>> =
                Mutex::new((0..misses.len()).map(|_| None).collect());
            let cursor = AtomicUsize::new(0);
            let workers = self.cfg.max_concurrency.min(misses.len());
            std::thread::scope(|scope| {
                for _ in 0..workers {
                    scope.spawn(|| loop {
                        let slot = cursor.fetch_add(1, Ordering::SeqCst);
                        if slot >= misses.len() {
                            break;
                        }
                        let request = &requests[misses[slot]];
                        let outcome = self.call_with_retry(stage, request);
                        slots.lock().expect("slot lock")[slot] = Some(outcome);
                    });
                }
            });
            let outcomes = slots.into_inner().expect("slot lock");
            for (slot, outcome) in outcomes.into_iter().enumerate() {
                let i = misses[slot];
                let outcome = outcome.expect("worker filled every slot");
                if let (Some(cache), Ok((body, _))) = (&self.cache, &outcome) {
                    if let Err(e) = cache.lock().expect("cache lock").put(keys[i].clone(), body.clone()) {
                        log::warn!("cache write failed: {e}");
                    }
                }
                results[i] = Some(outcome);
            }
        }

        results.into_iter().map(|r| r.expect("every slot resolved")).collect()
    }

    fn call_with_retry(&self, stage: Stage, request: &HttpRequest) -> Result<(String, CallStats)> {
        let policy = &self.cfg.retry;
        let mut stats = CallStats::default();
        loop {
            stats.attempts += 1;
            let failure: (Option<u16>, String) = match self.transport.execute(request) {
                Ok(resp) if resp.status == 200 => {
                    self.meter.record(stage, &parse_usage(&resp.body, stats.attempts - 1));
                    return Ok((resp.body, stats));
                }
                Ok(resp) if resp.status == 429 || (500..600).contains(&resp.status) => {
                    (Some(resp.status), truncated(&resp.body))
                }
                Ok(resp) => {
                    return Err(Error::Gateway {
                        status: Some(resp.status),
                        message: truncated(&resp.body),
                    });
                }
                Err(e) => (None, e.to_string()),
            };
            if stats.attempts >= policy.max_attempts {
                return Err(Error::Gateway {
                    status: failure.0,
                    message: format!("{} (giving up after {} attempts)", failure.1, stats.attempts),
                });
            }
            let delay = backoff_delay_ms(policy, stats.attempts - 1);
            log::warn!(
                "gateway retry {}/{} after {:?} failure, sleeping {delay}ms",
                stats.attempts,
                policy.max_attempts - 1,
                failure.0
            );
            stats.retry_delays_ms.push(delay);
            std::thread::sleep(Duration::from_millis(delay));
        }
    }
}

fn parse_usage(body: &str, retries: u32) -> Usage {
    let parsed: Value = serde_json::from_str(body).unwrap_or(Value::Null);
    Usage {
        requests: 1,
        input_tokens: parsed["usage"]["prompt_tokens"].as_u64().unwrap_or(0),
        output_tokens: parsed["usage"]["completion_tokens"].as_u64().unwrap_or(0),
        retries: u64::from(retries),
    }
}

fn truncated(body: &str) -> String {
    const LIMIT: usize = 300;
    if body.len() <= LIMIT {
        body.to_string()
    } else {
        let mut end = LIMIT;
        while !body.is_char_boundary(end) {
            end -= 1;
        }
        format!("{}...", &body[..end])
    }
}

/// Embedding provider backed by the gateway's /v1/embeddings endpoint.
/// Normalizes every vector on the way in.
pub struct RemoteEmbedder {
    gateway: Arc<Gateway>,
    name: String,
}

impl RemoteEmbedder {
    pub fn new(gateway: Arc<Gateway>) -> Self {
        let name = format!("remote/{}", gateway.cfg.embedding_model);
        Self { gateway, name }
    }
}

impl EmbeddingProvider for RemoteEmbedder {
    fn name(&self) -> &str {
        &self.name
    }

    fn dim(&self) -> usize {
        self.gateway.cfg.embedding_dim
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Embedding>> {
        let raw = self.gateway.embed_texts(texts)?;
        let dim = self.dim();
        raw.into_iter()
            .map(|e| {
                if e.dim() != dim {
                    return Err(Error::Embedding(format!(
                        "gateway served dimension {}, config says {dim}",
                        e.dim()
                    )));
                }
                Ok(l2_normalize(e))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chat_body(text: &str, prompt_tokens: u64, completion_tokens: u64) -> String {
        json!({
            "choices": [{"message": {"role": "assistant", "content": text}}],
            "usage": {"prompt_tokens": prompt_tokens, "completion_tokens": completion_tokens},
        })
        .to_string()
    }

    fn quick_retry() -> RetryPolicy {
        RetryPolicy { max_attempts: 4, backoff_base_ms: 1, backoff_multiplier: 2.0 }
    }

    #[test]
    fn backoff_schedule_is_exponential() {
        let p = RetryPolicy { max_attempts: 4, backoff_base_ms: 500, backoff_multiplier: 2.0 };
        assert_eq!(backoff_delay_ms(&p, 0), 500);
        assert_eq!(backoff_delay_ms(&p, 1), 1000);
        assert_eq!(backoff_delay_ms(&p, 2), 2000);
    }

    #[test]
    fn chat_complete_returns_body_and_meters_usage() {
        let transport =
            Arc::new(ScriptedTransport::with_responses(vec![(200, chat_body("hi there", 12, 3))]));
        let gw = Gateway::new(GatewayConfig::default(), transport.clone()).unwrap();
        let (text, stats) = gw.chat_complete(Stage::Generation, "sys", "user").unwrap();
        assert_eq!(text, "hi there");
        assert_eq!(stats.attempts, 1);
        assert!(!stats.cached);
        let snap = gw.meter().snapshot();
        let usage = snap[&Stage::Generation];
        assert_eq!(usage.requests, 1);
        assert_eq!(usage.input_tokens, 12);
        assert_eq!(usage.output_tokens, 3);
        assert_eq!(transport.calls(), 1);
    }

    #[test]
    fn rate_limit_retries_follow_schedule() {
        let transport = Arc::new(ScriptedTransport::with_responses(vec![
            (429, "slow down".into()),
            (429, "slow down".into()),
            (200, chat_body("ok", 1, 1)),
        ]));
        let cfg = GatewayConfig { retry: quick_retry(), ..GatewayConfig::default() };
        let gw = Gateway::new(cfg, transport.clone()).unwrap();
        let (text, stats) = gw.chat_complete(Stage::Extraction, "s", "u").unwrap();
        assert_eq!(text, "ok");
        assert_eq!(stats.attempts, 3);
        assert_eq!(stats.retry_delays_ms, vec![1, 2]);
        assert_eq!(transport.calls(), 3);
        assert_eq!(gw.meter().snapshot()[&Stage::Extraction].retries, 2);
    }

    #[test]
    fn client_errors_do_not_retry() {
        let transport = Arc::new(ScriptedTransport::with_responses(vec![(400, "bad request".into())]));
        let cfg = GatewayConfig { retry: quick_retry(), ..GatewayConfig::default() };
        let gw = Gateway::new(cfg, transport.clone()).unwrap();
        match gw.chat_complete(Stage::Generation, "s", "u") {
            Err(Error::Gateway { status: Some(400), .. }) => {}
            other => panic!("expected 400 error, got {other:?}"),
        }
        assert_eq!(transport.calls(), 1);
    }

    #[test]
    fn retries_exhaust_into_error() {
        let transport = Arc::new(ScriptedTransport::with_responses(vec![(429, "nope".into())]));
        let cfg = GatewayConfig { retry: quick_retry(), ..GatewayConfig::default() };
        let gw = Gateway::new(cfg, transport.clone()).unwrap();
        match gw.chat_complete(Stage::Generation, "s", "u") {
            Err(Error::Gateway { status: Some(429), message }) => {
                assert!(message.contains("giving up after 4 attempts"));
            }
            other => panic!("expected 429 exhaustion, got {other:?}"),
        }
        assert_eq!(transport.calls(), 4);
    }

    #[test]
    fn cache_hits_skip_transport_within_and_across_gateways() {
        let dir = tempfile::tempdir().unwrap();
        let cache_path = dir.path().join("cache.jsonl");
        let cfg = GatewayConfig { cache_path: Some(cache_path.clone()), ..GatewayConfig::default() };

        let t1 = Arc::new(ScriptedTransport::with_responses(vec![(200, chat_body("cached answer", 5, 2))]));
        let gw1 = Gateway::new(cfg.clone(), t1.clone()).unwrap();
        let (a, s1) = gw1.chat_complete(Stage::Generation, "s", "same question").unwrap();
        let (b, s2) = gw1.chat_complete(Stage::Generation, "s", "same question").unwrap();
        assert_eq!(a, "cached answer");
        assert_eq!(b, "cached answer");
        assert!(!s1.cached);
        assert!(s2.cached);
        assert_eq!(t1.calls(), 1, "second call was served from cache");

        // a fresh gateway over the same cache file never dials out
        let t2 = Arc::new(ScriptedTransport::with_responses(vec![(500, "should not be called".into())]));
        let gw2 = Gateway::new(cfg, t2.clone()).unwrap();
        let (c, s3) = gw2.chat_complete(Stage::Generation, "s", "same question").unwrap();
        assert_eq!(c, "cached answer");
        assert!(s3.cached);
        assert_eq!(t2.calls(), 0);
    }

    #[test]
    fn cache_is_keyed_by_canonical_content() {
        let a = json!({"model": "m", "messages": [{"role": "user", "content": "x"}]});
        let b = json!({"messages": [{"role": "user", "content": "x"}], "model": "m"});
        assert_eq!(cache_key("/v1/chat/completions", &a), cache_key("/v1/chat/completions", &b));
        let c = json!({"model": "m", "messages": [{"role": "user", "content": "y"}]});
        assert_ne!(cache_key("/v1/chat/completions", &a), cache_key("/v1/chat/completions", &c));
        assert_ne!(cache_key("/v1/embeddings", &a), cache_key("/v1/chat/completions", &a));
    }

    fn embedding_responder() -> impl Fn(&HttpRequest, usize) -> HttpResponse + Send + Sync {
        |req, _idx| {
            let inputs = req.body["input"].as_array().expect("input array").clone();
            let data: Vec<Value> = inputs
                .iter()
                .enumerate()
                .map(|(i, text)| {
                    // vector encodes the numeric suffix of "t{n}" for order checks
                    let n: f64 = text.as_str().unwrap().trim_start_matches('t').parse().unwrap();
                    json!({"index": i, "embedding": [n, 1.0]})
                })
                .collect();
            HttpResponse {
                status: 200,
                body: json!({"data": data, "usage": {"prompt_tokens": inputs.len() as u64}}).to_string(),
            }
        }
    }

    #[test]
    fn embeddings_split_batches_and_keep_order() {
        let transport = Arc::new(ScriptedTransport::with_responder(embedding_responder()));
        let cfg = GatewayConfig { max_batch: 3, ..GatewayConfig::default() };
        let gw = Gateway::new(cfg, transport.clone()).unwrap();
        let texts: Vec<String> = (0..7).map(|i| format!("t{i}")).collect();
        let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
        let embs = gw.embed_texts(&refs).unwrap();
        assert_eq!(transport.calls(), 3, "7 inputs at batch size 3");
        for (i, e) in embs.iter().enumerate() {
            assert_eq!(e.0[0], i as f32);
        }
        assert_eq!(gw.meter().snapshot()[&Stage::Embedding].input_tokens, 7);
    }

    #[test]
    fn pool_reaches_but_never_exceeds_the_bound() {
        let transport =
            Arc::new(ScriptedTransport::with_responder(embedding_responder()).with_rendezvous(4));
        let cfg = GatewayConfig { max_batch: 1, max_concurrency: 4, ..GatewayConfig::default() };
        let gw = Gateway::new(cfg, transport.clone()).unwrap();
        let texts: Vec<String> = (0..16).map(|i| format!("t{i}")).collect();
        let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
        let embs = gw.embed_texts(&refs).unwrap();
        assert_eq!(embs.len(), 16);
        assert_eq!(transport.calls(), 16);
        assert_eq!(transport.max_in_flight(), 4, "rendezvous proves the pool ran 4 wide");
    }

    #[test]
    fn meter_report_prices_stages() {
        let meter = UsageMeter::default();
        meter.record(
            Stage::Extraction,
            &Usage { requests: 2, input_tokens: 100, output_tokens: 10, retries: 0 },
        );
        meter.record(Stage::Embedding, &Usage { requests: 1, input_tokens: 200, ..Default::default() });
        let prices =
            PriceTable { llm_input_per_token: 0.5, llm_output_per_token: 1.0, embed_per_token: 0.1 };
        let report = meter_report(&meter, &prices);
        assert_eq!(report.stages["extraction"].cost, 60.0);
        assert_eq!(report.stages["embedding"].cost, 20.0);
        assert_eq!(report.total_cost, 80.0);
    }

    #[test]
    fn config_defaults_and_file_loading() {
        let cfg = GatewayConfig::default();
        assert_eq!(cfg.max_concurrency, 30);
        assert_eq!(cfg.api_key_env, "OPENAI_API_KEY");

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gw.json");
        std::fs::write(&path, r#"{"base_url": "http://localhost:8080", "max_batch": 8}"#).unwrap();
        let cfg = GatewayConfig::from_file(&path).unwrap();
        assert_eq!(cfg.base_url, "http://localhost:8080");
        assert_eq!(cfg.max_batch, 8);
        assert_eq!(cfg.max_concurrency, 30, "unset fields fall back to defaults");

        std::fs::write(&path, r#"{"max_concurrency": 0}"#).unwrap();
        assert!(GatewayConfig::from_file(&path).is_err());
    }
}
