mod common;

use std::sync::Arc;
use std::time::{Duration, Instant};

use common::{chat_reply, prompt_text, MockServer};
use macd::gateway::prompt::build_diagnosis_prompt;
use macd::gateway::{
    Gateway, GatewayError, GenerationConfig, LlmRequest, OpenAiBackend, ReplayBackend, RetryPolicy, RunLog,
};
use macd::model::PatientCase;

fn case() -> PatientCase {
    PatientCase {
        case_id: "c1".into(),
        hpi: "Sharp chest pain relieved by leaning forward.".into(),
        physical_exam: "Friction rub.".into(),
        labs: "Troponin normal.".into(),
        radiology: "Small effusion.".into(),
    }
}

fn fast_retry() -> RetryPolicy {
    RetryPolicy {
        attempts: 3,
        initial_backoff: Duration::from_millis(10),
    }
}

#[test]
fn server_errors_exhaust_retries() {
    let server = MockServer::start(|_| (500, "{}".into()));
    let gateway = Gateway::new(Arc::new(OpenAiBackend::new(server.base_url(), None, fast_retry()).unwrap()));
    let bundle = build_diagnosis_prompt(&case(), None);
    let cfg = GenerationConfig::for_model("m");
    let started = Instant::now();
    let err = gateway.complete(LlmRequest::new(&bundle, &cfg)).unwrap_err();
    assert!(matches!(err, GatewayError::BackendUnavailable(_)), "{err}");
    assert_eq!(server.hits(), 3);
    assert!(started.elapsed() >= Duration::from_millis(30));
}

#[test]
fn client_errors_are_not_retried() {
    let server = MockServer::start(|_| (400, "{}".into()));
    let gateway = Gateway::new(Arc::new(OpenAiBackend::new(server.base_url(), None, fast_retry()).unwrap()));
    let bundle = build_diagnosis_prompt(&case(), None);
    let cfg = GenerationConfig::for_model("m");
    assert!(gateway.complete(LlmRequest::new(&bundle, &cfg)).is_err());
    assert_eq!(server.hits(), 1);
}

#[test]
fn malformed_body_is_reported() {
    let server = MockServer::start(|_| (200, r#"{"choices":[]}"#.into()));
    let gateway = Gateway::new(Arc::new(OpenAiBackend::new(server.base_url(), None, fast_retry()).unwrap()));
    let bundle = build_diagnosis_prompt(&case(), None);
    let cfg = GenerationConfig::for_model("m");
    let err = gateway.complete(LlmRequest::new(&bundle, &cfg)).unwrap_err();
    assert!(matches!(err, GatewayError::MalformedResponse(_)), "{err}");
}

#[test]
fn request_carries_decoding_parameters_and_prefix() {
    let server = MockServer::start(|req| {
        let ok = req["temperature"] == 0.01
            && req["top_k"] == 1
            && req["top_p"] == 0.05
            && req["model"] == "llama-3.1-70b"
            && req["messages"].as_array().is_some_and(|m| m.last().unwrap()["role"] == "assistant");
        (200, chat_reply(if ok { "Pericarditis." } else { "bad request shape" }))
    });
    let gateway = Gateway::new(Arc::new(OpenAiBackend::new(server.base_url(), None, fast_retry()).unwrap()));
    let bundle = build_diagnosis_prompt(&case(), None);
    let cfg = GenerationConfig::for_model("llama-3.1-70b");
    let out = gateway.complete(LlmRequest::new(&bundle, &cfg)).unwrap();
    assert_eq!(out.text, "Pericarditis.");
}

#[test]
fn live_log_replays_without_network() {
    let server = MockServer::start(|req| {
        let text = prompt_text(req);
        (200, chat_reply(if text.contains("leaning forward") { "Pericarditis." } else { "Pneumonia." }))
    });
    let dir = tempfile::tempdir().unwrap();
    let log_path = dir.path().join("llm_log.jsonl");
    let live = Gateway::new(Arc::new(OpenAiBackend::new(server.base_url(), None, fast_retry()).unwrap()))
        .with_log(Arc::new(RunLog::open(&log_path).unwrap()));
    let cfg = GenerationConfig::for_model("m");
    let mut other = case();
    other.hpi = "Productive cough and fever.".into();
    let bundles = [build_diagnosis_prompt(&case(), None), build_diagnosis_prompt(&other, None)];
    let live_out: Vec<_> = bundles
        .iter()
        .map(|b| live.complete(LlmRequest::new(b, &cfg).pass(Some("p"))).unwrap())
        .collect();
    assert_eq!(server.hits(), 2);

    let replay = Gateway::new(Arc::new(ReplayBackend::load(&log_path).unwrap()));
    for (b, live) in bundles.iter().zip(&live_out) {
        let again = replay.complete(LlmRequest::new(b, &cfg)).unwrap();
        assert_eq!(again.text, live.text);
        assert_eq!(again.latency_seconds, live.latency_seconds);
    }
    assert_eq!(server.hits(), 2);
}
