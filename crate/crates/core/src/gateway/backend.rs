//! Completion backends: scripted, replay, and OpenAI-compatible HTTP.

use std::collections::{BTreeMap, VecDeque};
use std::path::Path;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::prompt::{PromptBundle, TemplateKind};
use super::runlog::LogRecord;
use super::{Completion, GatewayError, GenerationConfig};

/// What a backend sees for one call.
#[derive(Debug, Clone, Copy)]
pub struct BackendRequest<'a> {
    pub bundle: &'a PromptBundle,
    pub rendered: &'a str,
    pub bundle_hash: &'a str,
    pub cfg: &'a GenerationConfig,
    pub case_id: Option<&'a str>,
}

pub trait ChatBackend: Send + Sync {
    fn id(&self) -> &str;
    fn complete(&self, request: &BackendRequest<'_>) -> Result<Completion, GatewayError>;
}

/// One scripted response. Every populated matcher must hold; rules are
/// tried in order and the first match wins.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptRule {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<TemplateKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub case_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bundle_hash: Option<String>,
    /// Substring that must appear in the rendered prompt.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contains: Option<String>,
    pub completion: String,
}

impl ScriptRule {
    fn matches(&self, req: &BackendRequest<'_>) -> bool {
        self.model.as_deref().is_none_or(|m| m == req.cfg.model_id)
            && self.kind.is_none_or(|k| k == req.bundle.kind)
            && self.case_id.as_deref().is_none_or(|c| Some(c) == req.case_id)
            && self.bundle_hash.as_deref().is_none_or(|h| h == req.bundle_hash)
            && self.contains.as_deref().is_none_or(|s| req.rendered.contains(s))
    }
}

/// Canned completions for desk-scale runs. Lookups are pure.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptedBackend {
    #[serde(default)]
    pub rules: Vec<ScriptRule>,
    #[serde(default)]
    pub fallback: String,
}

impl ScriptedBackend {
    pub fn new(fallback: impl Into<String>) -> Self {
        Self {
            rules: Vec::new(),
            fallback: fallback.into(),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, GatewayError> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| GatewayError::BackendUnavailable(format!("{}: {e}", path.as_ref().display())))?;
        serde_json::from_str(&text).map_err(|e| GatewayError::MalformedResponse(format!("script file: {e}")))
    }

    pub fn rule(mut self, rule: ScriptRule) -> Self {
        self.rules.push(rule);
        self
    }

    pub fn on_case(self, kind: TemplateKind, case_id: &str, completion: impl Into<String>) -> Self {
        self.rule(ScriptRule {
            kind: Some(kind),
            case_id: Some(case_id.to_string()),
            completion: completion.into(),
            ..ScriptRule::default()
        })
    }

    pub fn on_model_case(
        self,
        model: &str,
        kind: TemplateKind,
        case_id: &str,
        completion: impl Into<String>,
    ) -> Self {
        self.rule(ScriptRule {
            model: Some(model.to_string()),
            kind: Some(kind),
            case_id: Some(case_id.to_string()),
            completion: completion.into(),
            ..ScriptRule::default()
        })
    }

    pub fn on_hash(self, kind: TemplateKind, hash: &str, completion: impl Into<String>) -> Self {
        self.rule(ScriptRule {
            kind: Some(kind),
            bundle_hash: Some(hash.to_string()),
            completion: completion.into(),
            ..ScriptRule::default()
        })
    }

    pub fn on_contains(self, kind: TemplateKind, needle: &str, completion: impl Into<String>) -> Self {
        self.rule(ScriptRule {
            kind: Some(kind),
            contains: Some(needle.to_string()),
            completion: completion.into(),
            ..ScriptRule::default()
        })
    }

    pub fn lookup(&self, req: &BackendRequest<'_>) -> &str {
        self.rules
            .iter()
            .find(|r| r.matches(req))
            .map(|r| r.completion.as_str())
            .unwrap_or(&self.fallback)
    }
}

impl ChatBackend for ScriptedBackend {
    fn id(&self) -> &str {
        "scripted"
    }

    fn complete(&self, request: &BackendRequest<'_>) -> Result<Completion, GatewayError> {
        Ok(Completion {
            text: self.lookup(request).to_string(),
            latency_seconds: 0.0,
        })
    }
}

/// Serves completions recorded in a run log, keyed by model and bundle hash.
pub struct ReplayBackend {
    entries: Mutex<BTreeMap<(String, String), VecDeque<Completion>>>,
}

impl ReplayBackend {
    pub fn from_records(records: &[LogRecord]) -> Self {
        let mut entries: BTreeMap<(String, String), VecDeque<Completion>> = BTreeMap::new();
        for r in records {
            entries
                .entry((r.model_id.clone(), r.bundle_hash.clone()))
                .or_default()
                .push_back(Completion {
                    text: r.completion.clone(),
                    latency_seconds: r.latency_seconds,
                });
        }
        Self {
            entries: Mutex::new(entries),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, GatewayError> {
        let records = super::runlog::read_log(path.as_ref())
            .map_err(|e| GatewayError::BackendUnavailable(format!("replay log: {e}")))?;
        Ok(Self::from_records(&records))
    }
}

impl ChatBackend for ReplayBackend {
    fn id(&self) -> &str {
        "replay"
    }

    fn complete(&self, request: &BackendRequest<'_>) -> Result<Completion, GatewayError> {
        let key = (request.cfg.model_id.clone(), request.bundle_hash.to_string());
        let mut entries = self.entries.lock().unwrap_or_else(|p| p.into_inner());
        let queue = entries
            .get_mut(&key)
            .ok_or_else(|| GatewayError::ReplayMiss(request.bundle_hash.to_string()))?;
        // The last recorded answer keeps serving once the queue drains.
        if queue.len() > 1 {
            Ok(queue.pop_front().expect("non-empty"))
        } else {
            queue
                .front()
                .cloned()
                .ok_or_else(|| GatewayError::ReplayMiss(request.bundle_hash.to_string()))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub attempts: u32,
    #[serde(with = "millis")]
    pub initial_backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            attempts: 3,
            initial_backoff: Duration::from_secs(1),
        }
    }
}

impl RetryPolicy {
    pub fn backoff(&self, attempt: u32) -> Duration {
        self.initial_backoff * 2u32.saturating_pow(attempt)
    }
}

mod millis {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        Ok(Duration::from_millis(u64::deserialize(d)?))
    }
}

pub const LLM_BASE_ENV: &str = "MACD_LLM_BASE";
pub const LLM_KEY_ENV: &str = "MACD_LLM_KEY";

/// OpenAI-compatible `/chat/completions` client.
pub struct OpenAiBackend {
    base_url: String,
    api_key: Option<String>,
    retry: RetryPolicy,
    client: reqwest::blocking::Client,
}

impl OpenAiBackend {
    pub fn new(base_url: impl Into<String>, api_key: Option<String>, retry: RetryPolicy) -> Result<Self, GatewayError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(600))
            .build()
            .map_err(|e| GatewayError::BackendUnavailable(e.to_string()))?;
        Ok(Self {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            api_key,
            retry,
            client,
        })
    }

    /// Reads `MACD_LLM_BASE` and `MACD_LLM_KEY`.
    pub fn from_env(retry: RetryPolicy) -> Result<Self, GatewayError> {
        let base = std::env::var(LLM_BASE_ENV)
            .map_err(|_| GatewayError::BackendUnavailable(format!("{LLM_BASE_ENV} is not set")))?;
        Self::new(base, std::env::var(LLM_KEY_ENV).ok(), retry)
    }

    fn body(&self, request: &BackendRequest<'_>) -> serde_json::Value {
        let b = request.bundle;
        let mut messages = vec![
            json!({"role": "system", "content": b.system_text}),
            json!({"role": "user", "content": b.user_text}),
        ];
        if !b.assistant_prefix.is_empty() {
            messages.push(json!({"role": "assistant", "content": b.assistant_prefix}));
        }
        json!({
            "model": request.cfg.model_id,
            "messages": messages,
            "temperature": request.cfg.temperature,
            "top_p": request.cfg.top_p,
            "top_k": request.cfg.top_k,
            "stream": false,
        })
    }

    fn attempt(&self, body: &serde_json::Value) -> Result<String, Attempt> {
        let mut req = self
            .client
            .post(format!("{}/chat/completions", self.base_url))
            .json(body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| Attempt::Retry(e.to_string()))?;
        let status = resp.status();
        if status.is_server_error() || status.as_u16() == 429 {
            return Err(Attempt::Retry(format!("HTTP {status}")));
        }
        if !status.is_success() {
            return Err(Attempt::Fatal(GatewayError::BackendUnavailable(format!("HTTP {status}"))));
        }
        let value: serde_json::Value = resp
            .json()
            .map_err(|e| Attempt::Fatal(GatewayError::MalformedResponse(e.to_string())))?;
        value
            .pointer("/choices/0/message/content")
            .and_then(|v| v.as_str())
            .map(str::to_string)
            .ok_or_else(|| Attempt::Fatal(GatewayError::MalformedResponse("missing choices[0].message.content".into())))
    }
}

enum Attempt {
    Retry(String),
    Fatal(GatewayError),
}

impl ChatBackend for OpenAiBackend {
    fn id(&self) -> &str {
        "openai"
    }

    fn complete(&self, request: &BackendRequest<'_>) -> Result<Completion, GatewayError> {
        let body = self.body(request);
        let started = Instant::now();
        let mut last = String::new();
        for attempt in 0..self.retry.attempts.max(1) {
            if attempt > 0 {
                std::thread::sleep(self.retry.backoff(attempt - 1));
            }
            match self.attempt(&body) {
                Ok(text) => {
                    return Ok(Completion {
                        text,
                        latency_seconds: started.elapsed().as_secs_f64(),
                    })
                }
                Err(Attempt::Fatal(e)) => return Err(e),
                Err(Attempt::Retry(msg)) => {
                    tracing::warn!(attempt = attempt + 1, error = %msg, "completion attempt failed");
                    last = msg;
                }
            }
        }
        Err(GatewayError::BackendUnavailable(format!(
            "{} attempts failed, last error: {last}",
            self.retry.attempts
        )))
    }
}
