//! Uniform chat-completion interface over pluggable backends.

pub mod backend;
pub mod prompt;
pub mod runlog;

use std::sync::{Arc, Condvar, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use backend::{BackendRequest, ChatBackend, OpenAiBackend, ReplayBackend, RetryPolicy, ScriptRule, ScriptedBackend};
pub use prompt::{PromptBundle, PromptError, TagDialect, TemplateKind};
pub use runlog::{LogRecord, RunLog};

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("prompt needs ~{estimated} tokens but the context window is {limit}")]
    ContextOverflow { estimated: usize, limit: usize },
    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("no recorded completion for bundle {0}")]
    ReplayMiss(String),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("run log write failed: {0}")]
    Log(#[from] std::io::Error),
}

/// Decoding parameters. Defaults match the deterministic deployment:
/// temperature 0.01, top-k 1, top-p 0.05, 16384-token context.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationConfig {
    pub model_id: String,
    pub temperature: f64,
    pub top_k: u32,
    pub top_p: f64,
    pub max_context_tokens: usize,
}

impl GenerationConfig {
    pub fn for_model(model_id: impl Into<String>) -> Self {
        Self {
            model_id: model_id.into(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(format!("temperature {} out of range", self.temperature));
        }
        if self.top_k == 0 {
            return Err("top_k must be positive".into());
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(format!("top_p {} not in (0, 1]", self.top_p));
        }
        if self.max_context_tokens == 0 {
            return Err("max_context_tokens must be positive".into());
        }
        Ok(())
    }
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            model_id: "default".into(),
            temperature: 0.01,
            top_k: 1,
            top_p: 0.05,
            max_context_tokens: 16384,
        }
    }
}

/// Conservative token estimate: ceil(chars / 4).
pub fn estimate_tokens(text: &str) -> usize {
    text.chars().count().div_ceil(4)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub text: String,
    pub latency_seconds: f64,
}

/// One call through the gateway.
#[derive(Debug, Clone, Copy)]
pub struct LlmRequest<'a> {
    pub bundle: &'a PromptBundle,
    pub cfg: &'a GenerationConfig,
    pub case_id: Option<&'a str>,
    pub agent_id: Option<&'a str>,
    pub pass: Option<&'a str>,
}

impl<'a> LlmRequest<'a> {
    pub fn new(bundle: &'a PromptBundle, cfg: &'a GenerationConfig) -> Self {
        Self {
            bundle,
            cfg,
            case_id: None,
            agent_id: None,
            pass: None,
        }
    }

    pub fn case(mut self, case_id: &'a str) -> Self {
        self.case_id = Some(case_id);
        self
    }

    pub fn agent(mut self, agent_id: &'a str) -> Self {
        self.agent_id = Some(agent_id);
        self
    }

    pub fn pass(mut self, pass: Option<&'a str>) -> Self {
        self.pass = pass;
        self
    }
}

struct InFlight {
    cap: usize,
    active: Mutex<usize>,
    freed: Condvar,
}

impl InFlight {
    fn acquire(&self) -> InFlightGuard<'_> {
        let mut active = self.active.lock().unwrap_or_else(|p| p.into_inner());
        while *active >= self.cap {
            active = self.freed.wait(active).unwrap_or_else(|p| p.into_inner());
        }
        *active += 1;
        InFlightGuard(self)
    }
}

struct InFlightGuard<'a>(&'a InFlight);

impl Drop for InFlightGuard<'_> {
    fn drop(&mut self) {
        let mut active = self.0.active.lock().unwrap_or_else(|p| p.into_inner());
        *active -= 1;
        self.0.freed.notify_one();
    }
}

/// Shareable front door for every model call. Renders, checks the
/// context budget, caps concurrency and logs each exchange before
/// returning it.
#[derive(Clone)]
pub struct Gateway {
    backend: Arc<dyn ChatBackend>,
    log: Option<Arc<RunLog>>,
    dialect: TagDialect,
    in_flight: Arc<InFlight>,
}

impl Gateway {
    pub fn new(backend: Arc<dyn ChatBackend>) -> Self {
        Self {
            backend,
            log: None,
            dialect: TagDialect::default(),
            in_flight: Arc::new(InFlight {
                cap: 8,
                active: Mutex::new(0),
                freed: Condvar::new(),
            }),
        }
    }

    pub fn with_log(mut self, log: Arc<RunLog>) -> Self {
        self.log = Some(log);
        self
    }

    pub fn with_dialect(mut self, dialect: TagDialect) -> Self {
        self.dialect = dialect;
        self
    }

    pub fn with_max_in_flight(mut self, cap: usize) -> Self {
        self.in_flight = Arc::new(InFlight {
            cap: cap.max(1),
            active: Mutex::new(0),
            freed: Condvar::new(),
        });
        self
    }

    pub fn log(&self) -> Option<&Arc<RunLog>> {
        self.log.as_ref()
    }

    pub fn dialect(&self) -> &TagDialect {
        &self.dialect
    }

    pub fn backend_id(&self) -> &str {
        self.backend.id()
    }

    pub fn complete(&self, request: LlmRequest<'_>) -> Result<Completion, GatewayError> {
        let bundle = request.bundle.clone().with_dialect(self.dialect.clone());
        let rendered = bundle.render();
        let estimated = estimate_tokens(&rendered);
        if estimated > request.cfg.max_context_tokens {
            return Err(GatewayError::ContextOverflow {
                estimated,
                limit: request.cfg.max_context_tokens,
            });
        }
        let bundle_hash = prompt::content_hash(&rendered);
        let completion = {
            let _permit = self.in_flight.acquire();
            self.backend.complete(&BackendRequest {
                bundle: &bundle,
                rendered: &rendered,
                bundle_hash: &bundle_hash,
                cfg: request.cfg,
                case_id: request.case_id,
            })?
        };
        if let Some(log) = &self.log {
            log.append(&LogRecord {
                timestamp: chrono::Utc::now(),
                template_kind: bundle.kind,
                bundle_hash,
                rendered_prompt: rendered,
                completion: completion.text.clone(),
                latency_seconds: completion.latency_seconds,
                model_id: request.cfg.model_id.clone(),
                case_id: request.case_id.map(str::to_string),
                agent_id: request.agent_id.map(str::to_string),
                pass: request.pass.map(str::to_string),
                slots: bundle.slots.clone(),
            })?;
        }
        Ok(completion)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::PatientCase;

    fn case(id: &str) -> PatientCase {
        PatientCase {
            case_id: id.into(),
            hpi: "h".into(),
            physical_exam: "p".into(),
            labs: "l".into(),
            radiology: "r".into(),
        }
    }

    #[test]
    fn defaults_match_deployment() {
        let cfg = GenerationConfig::default();
        assert_eq!(cfg.temperature, 0.01);
        assert_eq!(cfg.top_k, 1);
        assert_eq!(cfg.top_p, 0.05);
        assert_eq!(cfg.max_context_tokens, 16384);
        cfg.validate().unwrap();
    }

    #[test]
    fn scripted_backend_echoes_and_logs() {
        let backend = ScriptedBackend::new("fallback").on_case(TemplateKind::Diagnosis, "c1", "Pneumonia.");
        let log = Arc::new(RunLog::in_memory());
        let gw = Gateway::new(Arc::new(backend)).with_log(log.clone());
        let cfg = GenerationConfig::default();
        let b1 = prompt::build_diagnosis_prompt(&case("c1"), None);
        let b2 = prompt::build_diagnosis_prompt(&case("c2"), None);
        let out = gw.complete(LlmRequest::new(&b1, &cfg).case("c1")).unwrap();
        assert_eq!(out.text, "Pneumonia.");
        let out = gw.complete(LlmRequest::new(&b2, &cfg).case("c2")).unwrap();
        assert_eq!(out.text, "fallback");
        let records = log.records().unwrap();
        assert_eq!(records.len(), 2);
        assert_eq!(records[0].bundle_hash, b1.hash());
        assert_eq!(records[0].case_id.as_deref(), Some("c1"));
    }

    #[test]
    fn oversized_prompt_overflows() {
        // 70000 chars at 4 chars/token is 17500 tokens, above 16384.
        let mut c = case("big");
        c.hpi = "x".repeat(70_000);
        let bundle = prompt::build_diagnosis_prompt(&c, None);
        let gw = Gateway::new(Arc::new(ScriptedBackend::new("")));
        let err = gw.complete(LlmRequest::new(&bundle, &GenerationConfig::default())).unwrap_err();
        match err {
            GatewayError::ContextOverflow { estimated, limit } => {
                assert!(estimated >= 17_500);
                assert_eq!(limit, 16384);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(estimate_tokens(&"x".repeat(70_000)), 17_500);
        assert_eq!(estimate_tokens("abcde"), 2);
    }

    #[test]
    fn replay_serves_logged_completions() {
        let log = Arc::new(RunLog::in_memory());
        let scripted = ScriptedBackend::new("Cholecystitis.");
        let gw = Gateway::new(Arc::new(scripted)).with_log(log.clone());
        let cfg = GenerationConfig::default();
        let b = prompt::build_diagnosis_prompt(&case("c9"), None);
        gw.complete(LlmRequest::new(&b, &cfg)).unwrap();
        let replay = Gateway::new(Arc::new(ReplayBackend::from_records(&log.records().unwrap())));
        assert_eq!(replay.complete(LlmRequest::new(&b, &cfg)).unwrap().text, "Cholecystitis.");
        let mut changed = case("c10");
        changed.labs = "Troponin 0.01".into();
        let other = prompt::build_diagnosis_prompt(&changed, None);
        assert!(matches!(
            replay.complete(LlmRequest::new(&other, &cfg)),
            Err(GatewayError::ReplayMiss(_))
        ));
    }
}
