//! Batch caption grounding against a remote service with retries and an on-disk cache.

use std::fs;
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;
use std::time::Duration;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::grounding::{build_grounding_request, parse_or_salvage, GroundingRequest};
use super::{write_atomic, GroundedCaption, SampleRecord};
use crate::error::{Error, Result};
use crate::rng;

pub const API_KEY_ENV: &str = "FLAVARS_VLM_API_KEY";

/// Sends one request and returns the service's text reply.
pub trait Transport: Send + Sync {
    fn send(&self, request: &GroundingRequest) -> std::result::Result<String, String>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientConfig {
    pub endpoint: String,
    #[serde(default)]
    pub model: Option<String>,
    #[serde(default = "default_attempts")]
    pub max_attempts: usize,
    #[serde(default = "default_base_delay")]
    pub base_delay_ms: u64,
    #[serde(default = "default_max_delay")]
    pub max_delay_ms: u64,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    pub cache_dir: PathBuf,
    /// Re-ground records that already carry a grounded caption.
    #[serde(default)]
    pub force: bool,
    #[serde(default)]
    pub jitter_seed: u64,
}

fn default_attempts() -> usize {
    5
}
fn default_base_delay() -> u64 {
    500
}
fn default_max_delay() -> u64 {
    8000
}
fn default_in_flight() -> usize {
    4
}

impl ClientConfig {
    pub fn new(endpoint: impl Into<String>, cache_dir: impl Into<PathBuf>) -> Self {
        Self {
            endpoint: endpoint.into(),
            model: None,
            max_attempts: default_attempts(),
            base_delay_ms: default_base_delay(),
            max_delay_ms: default_max_delay(),
            max_in_flight: default_in_flight(),
            cache_dir: cache_dir.into(),
            force: false,
            jitter_seed: 0,
        }
    }

    /// Delay before retry number `attempt` (1-based): exponential with up to 50% jitter.
    pub fn backoff(&self, id: &str, attempt: usize) -> Duration {
        let exp = self.base_delay_ms.saturating_mul(1u64 << (attempt - 1).min(20));
        let capped = exp.min(self.max_delay_ms) as f64;
        let mut r = rng::derived(self.jitter_seed, id, attempt as u64);
        Duration::from_secs_f64(capped * (0.5 + 0.5 * r.random::<f64>()) / 1000.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Succeeded,
    Cached,
    Skipped,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordStatus {
    pub id: String,
    pub status: Status,
    /// Transport calls made for this record.
    pub attempts: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BatchReport {
    pub records: Vec<RecordStatus>,
}

impl BatchReport {
    pub fn count(&self, status: Status) -> usize {
        self.records.iter().filter(|r| r.status == status).count()
    }

    pub fn network_calls(&self) -> usize {
        self.records.iter().map(|r| r.attempts).sum()
    }
}

pub type Sleeper = dyn Fn(Duration) + Send + Sync;

pub struct GroundingClient {
    config: ClientConfig,
    transport: Box<dyn Transport>,
    sleeper: Box<Sleeper>,
}

impl GroundingClient {
    pub fn new(config: ClientConfig, transport: Box<dyn Transport>) -> Result<Self> {
        if config.max_attempts == 0 || config.max_in_flight == 0 {
            return Err(Error::Config("max_attempts and max_in_flight must be at least 1".into()));
        }
        Ok(Self {
            config,
            transport,
            sleeper: Box::new(std::thread::sleep),
        })
    }

    /// Replaces the real sleep between retries (tests use a no-op).
    pub fn with_sleeper(mut self, sleeper: Box<Sleeper>) -> Self {
        self.sleeper = sleeper;
        self
    }

    pub fn config(&self) -> &ClientConfig {
        &self.config
    }

    fn cache_path(&self, request: &GroundingRequest) -> PathBuf {
        self.config.cache_dir.join(format!("{}.txt", request.cache_key()))
    }

    /// Calls the transport until a parseable reply arrives or attempts run out.
    fn call_with_retry(&self, request: &GroundingRequest) -> (std::result::Result<(String, GroundedCaption), String>, usize) {
        let mut last = String::new();
        for attempt in 1..=self.config.max_attempts {
            if attempt > 1 {
                (self.sleeper)(self.config.backoff(&request.id, attempt - 1));
            }
            match self.transport.send(request) {
                Ok(text) => match parse_or_salvage(&text, request.image_width, request.image_height) {
                    Ok(g) => return (Ok((text, g)), attempt),
                    Err(e) => last = e.to_string(),
                },
                Err(e) => last = e,
            }
            log::warn!("grounding {} attempt {attempt} failed: {last}", request.id);
        }
        (Err(last), self.config.max_attempts)
    }
}

enum Outcome {
    Fresh { reply: String, grounded: GroundedCaption, attempts: usize, cache: PathBuf },
    Cached(GroundedCaption),
    Failed { error: String, attempts: usize },
}

/// Grounds every record, updating `grounded` in place. Per-record failures are
/// reported, never fatal; replies are cached so a re-run makes no calls.
pub fn caption_ground_batch<F>(records: &mut [SampleRecord], load_image: F, client: &GroundingClient) -> Result<BatchReport>
where
    F: Fn(&SampleRecord) -> Result<image::RgbImage> + Sync,
{
    fs::create_dir_all(&client.config.cache_dir)
        .map_err(|e| Error::io(format!("creating {}", client.config.cache_dir.display()), e))?;
    let pending: Vec<usize> = (0..records.len())
        .filter(|&i| client.config.force || records[i].grounded.is_none())
        .collect();
    let mut statuses: Vec<Option<RecordStatus>> = records
        .iter()
        .map(|r| {
            (!client.config.force && r.grounded.is_some()).then(|| RecordStatus {
                id: r.id.clone(),
                status: Status::Skipped,
                attempts: 0,
                warning: None,
                error: None,
            })
        })
        .collect();
    let next = AtomicUsize::new(0);
    let (tx, rx) = mpsc::channel::<(usize, Outcome)>();
    let shared: &[SampleRecord] = records;
    let workers = client.config.max_in_flight.min(pending.len()).max(1);
    let mut results: Vec<(usize, Outcome)> = Vec::with_capacity(pending.len());
    std::thread::scope(|s| -> Result<()> {
        for _ in 0..workers {
            let tx = tx.clone();
            let (next, pending, load_image) = (&next, &pending, &load_image);
            s.spawn(move || loop {
                let k = next.fetch_add(1, Ordering::SeqCst);
                let Some(&i) = pending.get(k) else { break };
                let outcome = ground_one(&shared[i], load_image, client);
                if tx.send((i, outcome)).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        // Single writer: only this thread touches the cache directory.
        for (i, outcome) in rx {
            if let Outcome::Fresh { reply, cache, .. } = &outcome {
                write_atomic(cache, reply.as_bytes())?;
            }
            results.push((i, outcome));
        }
        Ok(())
    })?;
    for (i, outcome) in results {
        let id = records[i].id.clone();
        let status = match outcome {
            Outcome::Fresh { grounded, attempts, .. } => {
                let warning = grounded.warning.clone();
                records[i].grounded = Some(grounded);
                RecordStatus { id, status: Status::Succeeded, attempts, warning, error: None }
            }
            Outcome::Cached(grounded) => {
                let warning = grounded.warning.clone();
                records[i].grounded = Some(grounded);
                RecordStatus { id, status: Status::Cached, attempts: 0, warning, error: None }
            }
            Outcome::Failed { error, attempts } => {
                RecordStatus { id, status: Status::Failed, attempts, warning: None, error: Some(error) }
            }
        };
        statuses[i] = Some(status);
    }
    Ok(BatchReport {
        records: statuses.into_iter().map(|s| s.expect("every record has a status")).collect(),
    })
}

fn ground_one<F>(record: &SampleRecord, load_image: &F, client: &GroundingClient) -> Outcome
where
    F: Fn(&SampleRecord) -> Result<image::RgbImage>,
{
    let request = match load_image(record).and_then(|img| build_grounding_request(record, &img)) {
        Ok(r) => r,
        Err(e) => return Outcome::Failed { error: e.to_string(), attempts: 0 },
    };
    let cache = client.cache_path(&request);
    if let Ok(text) = fs::read_to_string(&cache) {
        if let Ok(g) = parse_or_salvage(&text, request.image_width, request.image_height) {
            return Outcome::Cached(g);
        }
    }
    match client.call_with_retry(&request) {
        (Ok((reply, grounded)), attempts) => Outcome::Fresh { reply, grounded, attempts, cache },
        (Err(error), attempts) => Outcome::Failed { error, attempts },
    }
}

/// Test double replaying scripted replies per record id.
pub struct MockTransport {
    script: Box<dyn Fn(&GroundingRequest, usize) -> std::result::Result<String, String> + Send + Sync>,
    calls: std::sync::Mutex<std::collections::HashMap<String, usize>>,
}

impl MockTransport {
    /// `script(request, call_number)` with 1-based call numbers per record id.
    pub fn new(script: impl Fn(&GroundingRequest, usize) -> std::result::Result<String, String> + Send + Sync + 'static) -> Self {
        Self {
            script: Box::new(script),
            calls: Default::default(),
        }
    }

    /// Always answers with the original caption and one box covering the top-left quarter.
    pub fn echo() -> Self {
        Self::new(|req, _| Ok(echo_reply(req)))
    }

    pub fn calls(&self, id: &str) -> usize {
        self.calls.lock().unwrap().get(id).copied().unwrap_or(0)
    }

    pub fn total_calls(&self) -> usize {
        self.calls.lock().unwrap().values().sum()
    }
}

pub fn echo_reply(req: &GroundingRequest) -> String {
    serde_json::json!({
        "caption": format!("{} (grounded)", req.original_caption),
        "groundings": [{
            "phrase": req.original_caption.split_whitespace().last().unwrap_or("scene"),
            "bbox": [0, 0, (req.image_width / 2).max(1), (req.image_height / 2).max(1)]
        }]
    })
    .to_string()
}

impl Transport for MockTransport {
    fn send(&self, request: &GroundingRequest) -> std::result::Result<String, String> {
        let n = {
            let mut calls = self.calls.lock().unwrap();
            let c = calls.entry(request.id.clone()).or_default();
            *c += 1;
            *c
        };
        (self.script)(request, n)
    }
}

impl<T: Transport + ?Sized> Transport for std::sync::Arc<T> {
    fn send(&self, request: &GroundingRequest) -> std::result::Result<String, String> {
        (**self).send(request)
    }
}

/// JSON-over-HTTP transport authenticated with a bearer key from [`API_KEY_ENV`].
#[cfg(feature = "http")]
pub struct HttpTransport {
    endpoint: String,
    model: Option<String>,
    key: String,
    agent: ureq::Agent,
}

#[cfg(feature = "http")]
impl HttpTransport {
    pub fn from_env(config: &ClientConfig) -> Result<Self> {
        let key = std::env::var(API_KEY_ENV)
            .ok()
            .filter(|k| !k.is_empty())
            .ok_or_else(|| Error::Client(format!("{API_KEY_ENV} is not set")))?;
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(120)))
            .build()
            .into();
        Ok(Self {
            endpoint: config.endpoint.clone(),
            model: config.model.clone(),
            key,
            agent,
        })
    }
}

#[cfg(feature = "http")]
impl Transport for HttpTransport {
    fn send(&self, request: &GroundingRequest) -> std::result::Result<String, String> {
        let mut body = serde_json::to_value(request).map_err(|e| e.to_string())?;
        if let Some(m) = &self.model {
            body["model"] = serde_json::Value::String(m.clone());
        }
        let mut resp = self
            .agent
            .post(&self.endpoint)
            .header("Authorization", &format!("Bearer {}", self.key))
            .send_json(&body)
            .map_err(|e| e.to_string())?;
        let text = resp.body_mut().read_to_string().map_err(|e| e.to_string())?;
        // Chat-completion style envelopes carry the reply in choices[0].message.content.
        if let Ok(v) = serde_json::from_str::<serde_json::Value>(&text) {
            if let Some(content) = v.pointer("/choices/0/message/content").and_then(|c| c.as_str()) {
                return Ok(content.to_string());
            }
        }
        Ok(text)
    }
}
